"""``codecap`` command line tool.

Exit status: 0 on success, 1 when a service or validator says no (deny,
challenge, unknown object, broken chain, unreachable host), 2 on usage
or parse errors.  Rights functions are always read from files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import threading
from pathlib import Path

from . import protocol as P
from .certchain import (
    EncodingError,
    HeritageDecodeError,
    decode_heritage,
    encode_heritage,
    generate_keypair,
    parse_pubkey,
    read_keypair_file,
    read_pubkey_file,
    validate_heritage,
    write_keypair_file,
)
from .codecap import Codecap, CodecapError, amplify, confine, delegate, mint_root
from .directory import (
    ClientDirState,
    PathError,
    chdir,
    dir_chmod,
    dir_insert,
    dir_list,
    dir_lookup,
    dir_remove,
    resolve_path,
)
from .objectsvc import ObjectService, ServiceConfig
from .protocol import ServiceError, TransportError
from .rights import RFLSyntaxError
from .wire import Network, Server, TcpEndpoint

EXIT_OK = 0
EXIT_DENY = 1
EXIT_USAGE = 2
INSPECT_MAX_LINES = 10


class UsageError(Exception):
    pass


class Denied(Exception):
    pass


def codecap_home() -> Path:
    return Path(os.environ.get("CODECAP_HOME", Path.home() / ".codecap"))


# -- output -------------------------------------------------------------------


class Output:
    def __init__(self, machine: bool, stream=None):
        self.machine = machine
        self.stream = stream or sys.stdout

    def emit(self, kind: str, text: str = "", **fields):
        if self.machine:
            rec = {"kind": kind, **fields}
            if text and "text" not in rec:
                rec["text"] = text
            self.stream.write(json.dumps(rec, sort_keys=True) + "\n")
        elif text:
            self.stream.write(text if text.endswith("\n") else text + "\n")

    def raw(self, data: bytes):
        if self.machine:
            try:
                self.emit("payload", data.decode("utf-8"))
            except UnicodeDecodeError:
                self.emit("payload", hex=data.hex())
        else:
            buf = getattr(self.stream, "buffer", None)
            if buf is not None:
                self.stream.flush()
                buf.write(data)
                buf.flush()
            else:
                self.stream.write(data.decode("utf-8", "replace"))


# -- loading helpers ------------------------------------------------------------


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc


def load_heritage(path):
    try:
        return decode_heritage(_read_text(path))
    except (HeritageDecodeError, EncodingError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def load_key(path):
    try:
        return read_keypair_file(path)
    except OSError as exc:
        raise UsageError(f"cannot read key {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def load_pub(text: str) -> bytes:
    if re.fullmatch(r"[0-9a-fA-F]{64}", text.strip()):
        return parse_pubkey(text)
    try:
        return read_pubkey_file(text)
    except (OSError, ValueError, IndexError) as exc:
        raise UsageError(f"{text}: not a public key or key file") from exc


def load_rights(path) -> str:
    return _read_text(path).strip("\n")


def default_key(args):
    if args.key:
        return load_key(args.key)
    return load_key(codecap_home() / "key")


def load_codecap(args, cap_path=None) -> Codecap:
    path = cap_path or args.cap
    if path is None:
        raise UsageError("--cap is required")
    h = load_heritage(path)
    try:
        return Codecap(h, default_key(args))
    except CodecapError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def build_network(args, *roots) -> Network:
    net = Network()
    endpoints = codecap_home() / "endpoints"
    if endpoints.exists():
        for line in endpoints.read_text().splitlines():
            parts = line.split()
            if len(parts) == 2:
                net.register(parts[0], TcpEndpoint.parse(parts[1]))
    if getattr(args, "endpoint", None):
        ep = TcpEndpoint.parse(args.endpoint)
        for root in roots:
            net.register(root, ep)
    return net


def parse_params(pairs, files) -> dict:
    out = {}
    for item in pairs or []:
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise UsageError(f"--param expects name=value, got {item!r}")
        out[name] = int(value) if re.fullmatch(r"-?[0-9]+", value) else value
    for item in files or []:
        name, sep, path = item.partition("=")
        if not sep or not name:
            raise UsageError(f"--param-file expects name=path, got {item!r}")
        out[name] = load_rights(path)
    return out


def write_or_print(out: Output, args, h, kind="heritage"):
    text = encode_heritage(h)
    if getattr(args, "out", None):
        Path(args.out).write_text(text)
        out.emit(kind, f"wrote {args.out}", path=args.out, certs=len(h))
    else:
        out.emit(kind, text, certs=len(h))


def check_response(resp: P.Response):
    if resp.ok:
        return resp
    detail = resp.error or P.REASONS.get(resp.status, "")
    if resp.stage:
        detail += f" (stage {resp.stage})"
    if resp.challenge:
        detail += f"; WWW-Authenticate: {resp.challenge}"
    raise Denied(f"{resp.status} {detail}")


# -- commands -------------------------------------------------------------------


def cmd_keygen(args, out):
    seed = None
    if args.seed:
        try:
            seed = bytes.fromhex(args.seed)
        except ValueError:
            raise UsageError("--seed must be hex") from None
    try:
        kp = generate_keypair(seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    path = Path(args.out) if args.out else codecap_home() / "key"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_keypair_file(path, kp)
    Path(str(path) + ".pub").write_text(kp.public_hex + "\n")
    out.emit("key", kp.public_hex, pubkey=kp.public_hex, path=str(path))


def cmd_mint(args, out):
    svc = load_key(args.key)
    try:
        h = mint_root(
            svc, load_pub(args.subject_pub), load_rights(args.rights_file), args.plength,
            args.object_id, args.version, subject_name=args.subject_name,
        )
    except CodecapError as exc:
        raise UsageError(str(exc)) from exc
    write_or_print(out, args, h)


def cmd_delegate(args, out):
    c = load_codecap(args)
    rights = load_rights(args.rights_file)
    try:
        if args.confine:
            rights = confine(rights)
        h = delegate(c, load_pub(args.target_pub), rights, args.plength, subject_name=args.subject_name)
    except CodecapError as exc:
        raise UsageError(str(exc)) from exc
    write_or_print(out, args, h)


def cmd_confine(args, out):
    try:
        out.emit("rights", confine(load_rights(args.rights_file)))
    except CodecapError as exc:
        raise UsageError(str(exc)) from exc


def cmd_amplify(args, out):
    h = load_heritage(args.cap)
    try:
        c = amplify(h, default_key(args))
    except CodecapError as exc:
        raise UsageError(str(exc)) from exc
    write_or_print(out, args, c.heritage)


def cmd_inspect(args, out):
    h = load_heritage(args.cap)
    for i, cert in enumerate(h.certs, start=1):
        a = cert.attrs
        rights = a.get("rights", "")
        lines = rights.splitlines() or [""]
        truncated = 0
        if not args.full and len(lines) > INSPECT_MAX_LINES:
            truncated = len(lines) - INSPECT_MAX_LINES
            lines = lines[:INSPECT_MAX_LINES]
        if out.machine:
            out.emit(
                "cert", index=i, subject=a.get("subjectName"), pubkey=a.get("pubkey"),
                issuer=a.get("issuerPubkey"), pLength=a.get("pLength"), objectId=a.get("objectId"),
                version=a.get("version"), rights="\n".join(lines), truncatedLines=truncated,
            )
            continue
        text = [f"cert {i}"]
        text.append(f"  subject:  {a.get('subjectName') or a.get('pubkey')}")
        text.append(f"  pubkey:   {a.get('pubkey')}")
        text.append(f"  issuer:   {a.get('issuerPubkey')}")
        text.append(f"  pLength:  {a.get('pLength')}")
        for extra in ("objectId", "version", "objectKind", "notBefore", "notAfter"):
            if extra in a:
                text.append(f"  {extra}: {a[extra]}")
        text.append("  rights:")
        text.extend(f"    {ln}" for ln in lines)
        if truncated:
            text.append(f"    ... [{truncated} more lines; use --full]")
        out.emit("cert", "\n".join(text))


def cmd_validate(args, out):
    h = load_heritage(args.cap)
    report = validate_heritage(load_pub(args.root_pub), h)
    out.emit("validation", str(report), ok=report.ok, check=report.check, index=report.index)
    if not report.ok:
        raise Denied(None)


def cmd_request(args, out):
    c = load_codecap(args)
    attrs = {"type": args.type, **parse_params(args.param, args.param_file)}
    payload = Path(args.payload_file).read_bytes() if args.payload_file else b""
    net = build_network(args, c.root_pubkey)
    resp = check_response(net.call(c, attrs, payload))
    if resp.payload and args.out:
        Path(args.out).write_bytes(resp.payload)
        out.emit("payload", f"wrote {args.out}", path=args.out)
    elif resp.payload:
        out.raw(resp.payload)
    else:
        out.emit("status", "ok", status=resp.status)


def _dir_state(args):
    home_path = args.cap or codecap_home() / "home.cap"
    home = load_codecap(args, home_path)
    cwd_path = codecap_home() / "cwd.cap"
    working = load_codecap(args, cwd_path) if cwd_path.exists() and not args.cap else None
    return ClientDirState(home, working)


def cmd_dir(args, out):
    if args.dir_cmd in ("chdir", "resolve"):
        st = _dir_state(args)
        net = build_network(args, st.home.root_pubkey, st.working.root_pubkey)
        if args.dir_cmd == "resolve":
            h = resolve_path(net, st, args.path, args.group)
            write_or_print(out, args, h)
        else:
            st = chdir(net, st, args.path, args.group)
            home = codecap_home()
            home.mkdir(parents=True, exist_ok=True)
            (home / "cwd.cap").write_text(encode_heritage(st.working.heritage))
            out.emit("chdir", f"working directory: {args.path}", path=args.path)
        return

    dc = load_codecap(args)
    net = build_network(args, dc.root_pubkey)
    if args.dir_cmd == "lookup":
        write_or_print(out, args, dir_lookup(net, dc, args.name, args.group))
    elif args.dir_cmd == "chmod":
        dir_chmod(net, dc, args.name, args.group, load_rights(args.rights_file))
        out.emit("status", "ok")
    elif args.dir_cmd == "insert":
        rights = {}
        for item in args.rights or []:
            g, sep, path = item.partition("=")
            if not sep:
                raise UsageError(f"--rights expects group=file, got {item!r}")
            rights[g] = load_rights(path)
        dir_insert(net, dc, args.name, load_heritage(args.entry), rights)
        out.emit("status", "ok")
    elif args.dir_cmd == "remove":
        dir_remove(net, dc, args.name)
        out.emit("status", "ok")
    elif args.dir_cmd == "list":
        for name, groups in dir_list(net, dc):
            out.emit("row", f"{name}\t{','.join(groups)}", name=name, groups=groups)


def cmd_serve(args, out):
    key = load_key(args.key)
    config = ServiceConfig(key, subject=args.subject, gc_period=args.gc_period)
    net = build_network(args)
    svc = ObjectService(config, store_dir=args.store, network=net)
    server = Server(svc)
    host, port = server.serve_tcp(*_listen_addr(args.listen))
    net.register(key.public_key, TcpEndpoint(host, port))
    if args.gc_period:
        svc.start_gc()
    out.emit("serving", f"serving {args.subject} ({key.public_hex}) on {host}:{port}", host=host, port=port)
    sys.stdout.flush()
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()


def _listen_addr(addr):
    ep = TcpEndpoint.parse(addr)
    return ep.host, ep.port


def cmd_gc(args, out):
    c = load_codecap(args)
    resp = check_response(build_network(args, c.root_pubkey).call(c, {"type": "GCSWEEP"}))
    for line in resp.text().splitlines():
        what, _, oid = line.partition(" ")
        out.emit("gc", line, outcome=what, objectId=oid)


def cmd_bump(args, out):
    c = load_codecap(args)
    resp = check_response(build_network(args, c.root_pubkey).call(c, {"type": "BUMPVERSION"}))
    write_or_print(out, args, decode_heritage(resp.text()))


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="codecap", description="Code capability tool")
    p.add_argument("--machine", action="store_true", help="one JSON record per result")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--machine", action="store_true", default=argparse.SUPPRESS)
        return sp

    sp = cmd("keygen", cmd_keygen, "create a key pair file")
    sp.add_argument("--out", help="key file (default $CODECAP_HOME/key)")
    sp.add_argument("--seed", help="64 hex chars for a reproducible key")

    sp = cmd("mint", cmd_mint, "issue a root heritage with a service key")
    sp.add_argument("--key", required=True, help="service key file")
    sp.add_argument("--subject-pub", required=True)
    sp.add_argument("--rights-file", required=True)
    sp.add_argument("--plength", type=int, required=True)
    sp.add_argument("--object-id")
    sp.add_argument("--version", type=int)
    sp.add_argument("--subject-name")
    sp.add_argument("--out")

    sp = cmd("delegate", cmd_delegate, "extend a codecap to another key")
    sp.add_argument("--cap", required=True)
    sp.add_argument("--key")
    sp.add_argument("--target-pub", required=True)
    sp.add_argument("--rights-file", required=True)
    sp.add_argument("--plength", type=int, required=True)
    sp.add_argument("--confine", action="store_true", help="wrap the rights so the target cannot delegate")
    sp.add_argument("--subject-name")
    sp.add_argument("--out")

    sp = cmd("confine", cmd_confine, "print a confined version of a rights file")
    sp.add_argument("--rights-file", required=True)

    sp = cmd("amplify", cmd_amplify, "cut a heritage back to your own certificate")
    sp.add_argument("--cap", required=True)
    sp.add_argument("--key")
    sp.add_argument("--out")

    sp = cmd("inspect", cmd_inspect, "show the certificates of a heritage")
    sp.add_argument("--cap", required=True)
    sp.add_argument("--full", action="store_true", help="print rights functions in full")

    sp = cmd("validate", cmd_validate, "check a heritage against a root key")
    sp.add_argument("--root-pub", required=True)
    sp.add_argument("--cap", required=True)

    def remote(sp, cap_required=True):
        sp.add_argument("--cap", required=cap_required)
        sp.add_argument("--key")
        sp.add_argument("--endpoint", help="host:port of the service")

    sp = cmd("request", cmd_request, "sign and send a request")
    remote(sp)
    sp.add_argument("--type", required=True)
    sp.add_argument("--param", action="append", metavar="NAME=VALUE")
    sp.add_argument("--param-file", action="append", metavar="NAME=PATH")
    sp.add_argument("--payload-file")
    sp.add_argument("--out")

    sp = cmd("dir", cmd_dir, "directory operations")
    dsub = sp.add_subparsers(dest="dir_cmd", required=True)
    for name in ("lookup", "chmod", "insert", "remove", "list", "chdir", "resolve"):
        dp = dsub.add_parser(name)
        remote(dp, cap_required=name not in ("chdir", "resolve"))
        if name in ("lookup", "chmod", "insert", "remove"):
            dp.add_argument("name")
        if name in ("chdir", "resolve"):
            dp.add_argument("path")
        if name in ("lookup", "chmod", "chdir", "resolve"):
            dp.add_argument("--group", required=True)
        if name == "chmod":
            dp.add_argument("--rights-file", required=True)
        if name == "insert":
            dp.add_argument("--entry", required=True, help="heritage file to store in the row")
            dp.add_argument("--rights", action="append", metavar="GROUP=FILE")
        if name in ("lookup", "resolve"):
            dp.add_argument("--out")

    sp = cmd("serve", cmd_serve, "run an object service")
    sp.add_argument("--key", required=True)
    sp.add_argument("--store", required=True, help="object store directory")
    sp.add_argument("--listen", default="127.0.0.1:7070")
    sp.add_argument("--subject", default="codecap-service")
    sp.add_argument("--gc-period", type=int, default=3600)

    sp = cmd("gc", cmd_gc, "ask a service to run a garbage-collection sweep")
    remote(sp)

    sp = cmd("bump", cmd_bump, "bump an object's version (revokes outstanding caps)")
    remote(sp)
    sp.add_argument("--out")
    return p


def run(argv=None, stdout=None, stderr=None) -> int:
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    out = Output(args.machine, stdout)
    try:
        args.fn(args, out)
    except Denied as exc:
        if exc.args and exc.args[0]:
            print(f"codecap: {exc.args[0]}", file=stderr)
        return EXIT_DENY
    except PathError as exc:
        print(f"codecap: {exc}", file=stderr)
        return EXIT_DENY
    except (ServiceError, TransportError) as exc:
        print(f"codecap: {exc}", file=stderr)
        return EXIT_DENY
    except (UsageError, RFLSyntaxError, ValueError) as exc:
        print(f"codecap: {exc}", file=stderr)
        return EXIT_USAGE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
