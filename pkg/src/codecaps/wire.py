"""Client/server transport for codecap requests.

Every call carries the heritage in an ``Authentication: Codecaps`` header
(or a session token standing in for it) plus the armored, signed request
certificate.  A request without a usable heritage is answered with a 401
challenge naming the service's realm.

The transport contract is only that the server learns an authentic
public key for its peer and the client learns the server's.  Two
transports satisfy it: :class:`LoopbackEndpoint` for in-process use and
:class:`TcpEndpoint`, which runs a mutual key-proof handshake before any
frames are exchanged.
"""

from __future__ import annotations

import hashlib
import logging
import secrets
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

from . import protocol as P
from .certchain import (
    ARMOR_BEGIN,
    ARMOR_END,
    EncodingError,
    Heritage,
    HeritageDecodeError,
    KeyPair,
    RequestCert,
    decode_heritage,
    decode_request,
    encode_heritage,
    encode_request,
    validate_heritage,
    verify_signature,
)
from .codecap import Codecap, sign_request
from .protocol import Response, TransportError

log = logging.getLogger(__name__)

SCHEME = "Codecaps"
HEADER_NAME = "Authentication"
ACCEPTED_HEADER_NAMES = ("Authentication", "Authorization")
PROTOCOL = "CODECAP/1"
MAX_WIRE_CERTS = 16
SESSION_TTL = 15 * 60
MAX_HEADER_BYTES = 256 * 1024
MAX_PAYLOAD_BYTES = 16 * 1024 * 1024


class AuthHeaderError(ValueError):
    pass


class FrameError(ValueError):
    pass


# -- Authentication header ----------------------------------------------------


def fold_heritage(h: Heritage) -> str:
    """Armored heritage with line breaks replaced by single spaces."""
    return " ".join(encode_heritage(h).split("\n")).strip()


def unfold_heritage(folded: str) -> str:
    begin, end = ARMOR_BEGIN.split(" "), ARMOR_END.split(" ")
    tokens = folded.split(" ")
    lines, i = [], 0
    while i < len(tokens):
        if tokens[i : i + len(begin)] == begin:
            lines.append(ARMOR_BEGIN)
            i += len(begin)
        elif tokens[i : i + len(end)] == end:
            lines.append(ARMOR_END)
            i += len(end)
        elif tokens[i] == "":
            raise AuthHeaderError("malformed folding (empty token)")
        else:
            lines.append(tokens[i])
            i += 1
    return "\n".join(lines) + "\n"


def encode_auth_header(h: Heritage) -> str:
    return f"{HEADER_NAME}: {SCHEME} {fold_heritage(h)}"


def parse_auth_header(s: str) -> Heritage:
    """Parse a full header line or just its value (``Codecaps <folded>``)."""
    s = s.strip()
    name, sep, rest = s.partition(":")
    if sep and name.strip() in ACCEPTED_HEADER_NAMES:
        s = rest.strip()
    elif sep and " " not in name:
        raise AuthHeaderError(f"unexpected header {name.strip()!r}")
    scheme, _, folded = s.partition(" ")
    if scheme != SCHEME:
        raise AuthHeaderError(f"unsupported scheme {scheme!r}")
    if not folded:
        raise AuthHeaderError("empty heritage")
    try:
        h = decode_heritage(unfold_heritage(folded))
    except HeritageDecodeError as exc:
        raise AuthHeaderError(f"heritage {exc}") from exc
    if len(h) > MAX_WIRE_CERTS:
        raise AuthHeaderError(f"heritage longer than {MAX_WIRE_CERTS} certificates")
    return h


def challenge_header(realm: str) -> str:
    return f"{SCHEME} realm={realm}"


# -- frames -------------------------------------------------------------------


@dataclass
class RequestFrame:
    request: RequestCert
    headers: dict = field(default_factory=dict)
    payload: bytes = b""

    def to_bytes(self) -> bytes:
        headers = dict(self.headers)
        if self.payload:
            headers["Content-Length"] = str(len(self.payload))
        head = [f"{PROTOCOL} CALL"] + [f"{k}: {v}" for k, v in headers.items()]
        text = "\n".join(head) + "\n\n" + encode_request(self.request) + "\n\n"
        return text.encode("utf-8") + self.payload


def response_to_bytes(resp: Response) -> bytes:
    headers = dict(resp.headers)
    if resp.error:
        headers["Error"] = resp.error
    if resp.stage:
        headers["Stage"] = resp.stage
    headers["Content-Length"] = str(len(resp.payload))
    head = [f"{PROTOCOL} {resp.status}"] + [f"{k}: {v}" for k, v in headers.items()]
    return ("\n".join(head) + "\n\n").encode("utf-8") + resp.payload


def _parse_headers(lines) -> dict:
    headers = {}
    for line in lines:
        name, sep, value = line.partition(":")
        if not sep or not name.strip():
            raise FrameError(f"bad header line {line[:40]!r}")
        headers[name.strip()] = value.strip()
    return headers


def read_request_frame(readline: Callable[[], bytes], read: Callable[[int], bytes]) -> Optional[RequestFrame]:
    """Read one request frame from a byte stream; ``None`` on clean EOF."""
    first = readline()
    if not first:
        return None
    first = first.decode("utf-8").rstrip("\n")
    if first != f"{PROTOCOL} CALL":
        raise FrameError(f"bad request line {first[:40]!r}")
    total = len(first)
    header_lines = []
    while True:
        line = readline()
        total += len(line)
        if not line or total > MAX_HEADER_BYTES:
            raise FrameError("truncated or oversized header")
        line = line.decode("utf-8").rstrip("\n")
        if not line:
            break
        header_lines.append(line)
    headers = _parse_headers(header_lines)

    cert_lines = []
    while True:
        line = readline()
        total += len(line)
        if not line or total > MAX_HEADER_BYTES:
            raise FrameError("truncated request certificate")
        line = line.decode("utf-8").rstrip("\n")
        cert_lines.append(line)
        if line == ARMOR_END:
            break
    if readline() not in (b"\n", b"\r\n"):
        raise FrameError("missing blank line after request certificate")
    try:
        request = decode_request("\n".join(cert_lines))
    except (HeritageDecodeError, EncodingError) as exc:
        raise FrameError(f"request certificate: {exc}") from exc

    length = int(headers.get("Content-Length", "0") or 0)
    if length < 0 or length > MAX_PAYLOAD_BYTES:
        raise FrameError("bad Content-Length")
    payload = read(length) if length else b""
    if len(payload) != length:
        raise FrameError("truncated payload")
    return RequestFrame(request=request, headers=headers, payload=payload)


def read_response(readline, read) -> Response:
    first = readline()
    if not first:
        raise TransportError("connection closed before response")
    parts = first.decode("utf-8").rstrip("\n").split(" ", 1)
    if len(parts) != 2 or parts[0] != PROTOCOL or not parts[1].isdigit():
        raise TransportError("bad response line")
    status = int(parts[1])
    lines = []
    while True:
        line = readline()
        if not line:
            raise TransportError("truncated response")
        line = line.decode("utf-8").rstrip("\n")
        if not line:
            break
        lines.append(line)
    headers = _parse_headers(lines)
    length = int(headers.pop("Content-Length", "0") or 0)
    payload = read(length) if length else b""
    if len(payload) != length:
        raise TransportError("truncated response payload")
    error = headers.pop("Error", "")
    stage = headers.pop("Stage", "")
    return Response(status=status, payload=payload, error=error, stage=stage, headers=headers)


class _BytesReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def readline(self) -> bytes:
        end = self.data.find(b"\n", self.pos)
        end = len(self.data) if end < 0 else end + 1
        line = self.data[self.pos : end]
        self.pos = end
        return line

    def read(self, n: int) -> bytes:
        chunk = self.data[self.pos : self.pos + n]
        self.pos += len(chunk)
        return chunk


def parse_request_frame(data: bytes) -> RequestFrame:
    r = _BytesReader(data)
    frame = read_request_frame(r.readline, r.read)
    if frame is None:
        raise FrameError("empty frame")
    return frame


def parse_response(data: bytes) -> Response:
    r = _BytesReader(data)
    return read_response(r.readline, r.read)


# -- sessions -----------------------------------------------------------------


class SessionCache:
    """token -> (heritage, transport key, expiry); thread-safe."""

    def __init__(self, ttl: int = SESSION_TTL, clock: Callable[[], float] = time.time):
        self.ttl = ttl
        self.clock = clock
        self._entries: dict = {}
        self._lock = threading.Lock()

    def issue(self, h: Heritage, transport_pub: Optional[str]) -> str:
        token = secrets.token_hex(16)
        with self._lock:
            self._expire()
            self._entries[token] = (h, transport_pub, self.clock() + self.ttl)
        return token

    def get(self, token: str, transport_pub: Optional[str]) -> Optional[Heritage]:
        with self._lock:
            self._expire()
            entry = self._entries.get(token)
        if entry is None or entry[1] != transport_pub:
            return None
        return entry[0]

    def _expire(self):
        now = self.clock()
        for t in [t for t, e in self._entries.items() if e[2] <= now]:
            del self._entries[t]

    def __len__(self):
        with self._lock:
            self._expire()
            return len(self._entries)


# -- server -------------------------------------------------------------------


def payload_digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


class Server:
    """Frame-level front end for an object service.

    ``handler`` is anything with ``service_key``, ``realm`` and
    ``handle_request(h, r, transport_pub, payload)``.  Heritages are
    checked against the service key unless the handler names a different
    ``trusted_root`` (an intermediate layer serving caps for a lower one).
    """

    def __init__(self, handler, session_ttl: int = SESSION_TTL, clock=time.time):
        self.handler = handler
        self.sessions = SessionCache(session_ttl, clock)
        self._tcp: Optional[socketserver.ThreadingTCPServer] = None

    @property
    def key(self) -> KeyPair:
        return self.handler.service_key

    @property
    def realm(self) -> str:
        return self.handler.realm

    def challenge(self, why: str) -> Response:
        return Response(
            P.UNAUTHORIZED,
            error=why,
            headers={"WWW-Authenticate": challenge_header(self.realm)},
        )

    def handle(self, frame: RequestFrame, peer_pub: Optional[str]) -> Response:
        token = frame.headers.get("Session")
        auth = next((frame.headers[n] for n in ACCEPTED_HEADER_NAMES if n in frame.headers), None)
        issued = None
        if auth is not None:
            try:
                h = parse_auth_header(auth)
            except AuthHeaderError as exc:
                return self.challenge(f"bad heritage: {exc}")
        elif token:
            h = self.sessions.get(token, peer_pub)
            if h is None:
                return self.challenge("unknown or expired session")
        else:
            return self.challenge("missing Authentication header")

        root = getattr(self.handler, "trusted_root", None) or self.key.public_hex
        report = validate_heritage(root, h)
        if not report.ok:
            return self.challenge(f"heritage does not validate: {report}")

        if frame.payload:
            if frame.request.attrs.get("payloadSha256") != payload_digest(frame.payload):
                return P.error_response(P.BAD_REQUEST, f"{P.MALFORMED}: payload digest mismatch")

        resp = self.handler.handle_request(h, frame.request, peer_pub, frame.payload)
        if resp.ok and auth is not None:
            issued = self.sessions.issue(h, peer_pub)
        if issued:
            resp.headers["Session"] = issued
        return resp

    def handle_bytes(self, data: bytes, peer_pub: Optional[str]) -> bytes:
        try:
            frame = parse_request_frame(data)
        except FrameError as exc:
            resp = P.error_response(P.BAD_REQUEST, f"{P.MALFORMED}: {exc}")
        else:
            resp = self.handle(frame, peer_pub)
        resp.headers.setdefault("Realm", self.realm)
        return response_to_bytes(resp)

    # TCP -------------------------------------------------------------

    def serve_tcp(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        """Start a threaded TCP listener in the background; return its address."""
        server = self

        class _Handler(socketserver.StreamRequestHandler):
            def handle(self):
                try:
                    peer = _server_handshake(self.rfile, self.wfile, server.key)
                except (TransportError, ValueError, UnicodeDecodeError) as exc:
                    log.info("handshake failed: %s", exc)
                    return
                while True:
                    try:
                        frame = read_request_frame(self.rfile.readline, self.rfile.read)
                    except (FrameError, ValueError, UnicodeDecodeError) as exc:
                        resp = P.error_response(P.BAD_REQUEST, f"{P.MALFORMED}: {exc}")
                        resp.headers["Realm"] = server.realm
                        self.wfile.write(response_to_bytes(resp))
                        return
                    if frame is None:
                        return
                    resp = server.handle(frame, peer)
                    resp.headers.setdefault("Realm", server.realm)
                    self.wfile.write(response_to_bytes(resp))
                    self.wfile.flush()

        class _TCP(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._tcp = _TCP((host, port), _Handler)
        threading.Thread(target=self._tcp.serve_forever, daemon=True).start()
        return self._tcp.server_address[:2]

    def shutdown(self):
        if self._tcp is not None:
            self._tcp.shutdown()
            self._tcp.server_close()
            self._tcp = None


def serve(config, handler=None, *, host: Optional[str] = None, port: int = 0, **service_kwargs) -> Server:
    """Wrap an object service in a :class:`Server`.

    With no ``handler`` a fresh :class:`~codecaps.objectsvc.ObjectService`
    is built from ``config``.  When ``host`` is given a TCP listener starts.
    """
    if handler is None:
        from .objectsvc import ObjectService

        handler = ObjectService(config, **service_kwargs)
    srv = Server(handler)
    if host is not None:
        srv.serve_tcp(host, port)
    return srv


# -- transport handshake ------------------------------------------------------


def _client_proof(server_pub: str, server_nonce: str, client_nonce: str) -> bytes:
    return f"codecap-client|{server_pub}|{server_nonce}|{client_nonce}".encode()


def _server_proof(client_pub: str, server_nonce: str, client_nonce: str) -> bytes:
    return f"codecap-server|{client_pub}|{server_nonce}|{client_nonce}".encode()


def _server_handshake(rfile, wfile, key: KeyPair) -> str:
    server_nonce = secrets.token_hex(16)
    wfile.write(f"CODECAP-HELLO {key.public_hex} {server_nonce}\n".encode())
    wfile.flush()
    parts = rfile.readline(4096).decode().split()
    if len(parts) != 4 or parts[0] != "CODECAP-AUTH":
        raise TransportError("bad AUTH line")
    _, client_pub, client_nonce, sig = parts
    if not verify_signature(client_pub, _client_proof(key.public_hex, server_nonce, client_nonce), bytes.fromhex(sig)):
        wfile.write(b"CODECAP-FAIL client proof\n")
        raise TransportError("client failed key proof")
    proof = key.sign(_server_proof(client_pub, server_nonce, client_nonce))
    wfile.write(f"CODECAP-OK {proof.hex()}\n".encode())
    wfile.flush()
    return client_pub


def _client_handshake(rfile, wfile, key: KeyPair, expected_server: str) -> None:
    parts = rfile.readline(4096).decode().split()
    if len(parts) != 3 or parts[0] != "CODECAP-HELLO":
        raise TransportError("bad HELLO line")
    _, server_pub, server_nonce = parts
    if server_pub != expected_server:
        raise TransportError("transport authentication failed: unexpected server key")
    client_nonce = secrets.token_hex(16)
    sig = key.sign(_client_proof(server_pub, server_nonce, client_nonce))
    wfile.write(f"CODECAP-AUTH {key.public_hex} {client_nonce} {sig.hex()}\n".encode())
    wfile.flush()
    reply = rfile.readline(4096).decode().split()
    if len(reply) != 2 or reply[0] != "CODECAP-OK":
        raise TransportError("transport authentication failed: server rejected client")
    if not verify_signature(server_pub, _server_proof(key.public_hex, server_nonce, client_nonce), bytes.fromhex(reply[1])):
        raise TransportError("transport authentication failed: bad server proof")


# -- endpoints ----------------------------------------------------------------


class LoopbackEndpoint:
    """In-process transport.  ``online = False`` simulates an unreachable host."""

    def __init__(self, server: Server):
        self.server = server
        self.online = True

    @property
    def name(self) -> str:
        return f"loopback:{self.server.key.public_hex[:16]}"

    def exchange(self, data: bytes, key: KeyPair, expected_server: str) -> bytes:
        if not self.online:
            raise TransportError(f"{self.name} unreachable")
        if self.server.key.public_hex != expected_server:
            raise TransportError("transport authentication failed: unexpected server key")
        # the client still proves key possession, as over TCP
        nonce = secrets.token_bytes(16)
        if not verify_signature(key.public_key, nonce, key.sign(nonce)):
            raise TransportError("client failed key proof")  # pragma: no cover
        return self.server.handle_bytes(data, key.public_hex)


class TcpEndpoint:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.host = host
        self.port = int(port)
        self.timeout = timeout

    @classmethod
    def parse(cls, addr: str) -> "TcpEndpoint":
        host, sep, port = addr.rpartition(":")
        if not sep or not port.isdigit():
            raise ValueError(f"endpoint must be host:port, got {addr!r}")
        return cls(host or "127.0.0.1", int(port))

    @property
    def name(self) -> str:
        return f"{self.host}:{self.port}"

    def exchange(self, data: bytes, key: KeyPair, expected_server: str) -> bytes:
        try:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError as exc:
            raise TransportError(f"{self.name} unreachable: {exc}") from exc
        with sock:
            rfile = sock.makefile("rb")
            wfile = sock.makefile("wb")
            try:
                _client_handshake(rfile, wfile, key, expected_server)
                wfile.write(data)
                wfile.flush()
                resp = read_response(rfile.readline, rfile.read)
            except OSError as exc:
                raise TransportError(f"{self.name}: {exc}") from exc
        return response_to_bytes(resp)


# -- client -------------------------------------------------------------------


class ClientSessions:
    """Client-side memory of session tokens, keyed by endpoint and heritage."""

    def __init__(self):
        self._tokens: dict = {}
        self._lock = threading.Lock()

    def get(self, endpoint, h: Heritage) -> Optional[str]:
        with self._lock:
            return self._tokens.get((endpoint.name, encode_heritage(h)))

    def put(self, endpoint, h: Heritage, token: str):
        with self._lock:
            self._tokens[(endpoint.name, encode_heritage(h))] = token

    def drop(self, endpoint, h: Heritage):
        with self._lock:
            self._tokens.pop((endpoint.name, encode_heritage(h)), None)


def client_call(
    endpoint,
    c: Codecap,
    attrs: Mapping,
    payload: bytes = b"",
    *,
    sessions: Optional[ClientSessions] = None,
    now: Optional[int] = None,
    send_heritage: bool = True,
    server_pub: Optional[str] = None,
) -> Response:
    """Sign ``attrs`` with ``c`` and send them to ``endpoint``.

    A 401 challenge is returned to the caller, not retried; its realm is
    on ``Response.realm``.  A stale session token is the one exception:
    the call is repeated once with the heritage inline.  The server must
    prove ``server_pub``, by default the root key of ``c``.
    """
    server_pub = server_pub or c.root_pubkey
    attrs = dict(attrs)
    if payload:
        attrs["payloadSha256"] = payload_digest(payload)
    r = sign_request(c, attrs, now=now)
    token = sessions.get(endpoint, c.heritage) if sessions is not None else None

    def send(headers):
        data = RequestFrame(request=r, headers=headers, payload=payload).to_bytes()
        return parse_response(endpoint.exchange(data, c.key, server_pub))

    if token:
        resp = send({"Session": token})
        if resp.status != P.UNAUTHORIZED:
            return resp
        sessions.drop(endpoint, c.heritage)
    headers = {HEADER_NAME: f"{SCHEME} {fold_heritage(c.heritage)}"} if send_heritage else {}
    resp = send(headers)
    if sessions is not None and resp.headers.get("Session"):
        sessions.put(endpoint, c.heritage, resp.headers["Session"])
    return resp


class Network:
    """Maps service public keys to endpoints."""

    def __init__(self):
        self._endpoints: dict = {}
        self.sessions = ClientSessions()

    def register(self, service_pub, endpoint) -> None:
        if isinstance(service_pub, (bytes, bytearray)):
            service_pub = bytes(service_pub).hex()
        self._endpoints[service_pub] = endpoint

    def endpoint_for(self, service_pub: str):
        try:
            return self._endpoints[service_pub]
        except KeyError:
            raise TransportError(f"no endpoint known for service {service_pub[:16]}") from None

    def call(self, c: Codecap, attrs: Mapping, payload: bytes = b"", **kw) -> Response:
        return client_call(self.endpoint_for(c.root_pubkey), c, attrs, payload, sessions=self.sessions, **kw)


def network_call(net, c: Codecap, attrs: Mapping, payload: bytes = b"", now: Optional[int] = None) -> Response:
    if isinstance(net, Network):
        return net.call(c, attrs, payload, now=now)
    return client_call(net, c, attrs, payload, now=now)  # a bare endpoint
