"""Codecap directories.

A directory is an object whose state is a table of rows.  Each row has a
name, a stored heritage (``cap``) ending at the directory service's key,
and one rights function per group column.  A lookup is a delegation: the
service appends a certificate for the caller, carrying the group's
rights function, to the stored heritage.

The server half (:func:`handle_directory_request`) runs inside the object
service; the client half (``dir_*``, :func:`resolve_path`, :func:`chdir`)
goes over the wire.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

from . import protocol as P
from .certchain import (
    EncodingError,
    Heritage,
    HeritageDecodeError,
    KeyPair,
    RequestCert,
    canonical_decode,
    canonical_encode,
    decode_heritage,
    encode_heritage,
    validate_heritage,
)
from .codecap import Codecap, delegate
from .protocol import Response, ServiceError
from .rights import RFLSyntaxError, parse_program
from .wire import network_call

DIRECTORY_KIND = "directory"
RESERVED_COLUMNS = ("name", "cap")
DENY_ALL = "false"


class DirectoryError(ServiceError):
    pass


class PathError(Exception):
    """Path resolution failed at ``component`` (1-based)."""

    def __init__(self, component: int, message: str, cause: Optional[Exception] = None):
        super().__init__(f"component {component}: {message}")
        self.component = component
        self.message = message
        self.cause = cause


@dataclass
class Row:
    name: str
    cap: Heritage
    group_rights: dict = field(default_factory=dict)


@dataclass
class DirectoryTable:
    rows: list = field(default_factory=list)
    groups: list = field(default_factory=list)

    def __post_init__(self):
        for g in self.groups:
            check_group_name(g)
        if len(set(self.groups)) != len(self.groups):
            raise ValueError("duplicate group name")
        names = [r.name for r in self.rows]
        if len(set(names)) != len(names):
            raise ValueError("duplicate row name")

    def row(self, name: str) -> Optional[Row]:
        for r in self.rows:
            if r.name == name:
                return r
        return None

    def put(self, row: Row) -> None:
        for i, r in enumerate(self.rows):
            if r.name == row.name:
                self.rows[i] = row
                return
        self.rows.append(row)

    def remove(self, name: str) -> bool:
        before = len(self.rows)
        self.rows = [r for r in self.rows if r.name != name]
        return len(self.rows) != before

    def encode(self) -> bytes:
        attrs = {"groups.count": len(self.groups), "rows.count": len(self.rows)}
        for i, g in enumerate(self.groups):
            attrs[f"groups.{i}"] = g
        for i, r in enumerate(self.rows):
            attrs[f"rows.{i}"] = r.name
            attrs[f"row.{r.name}.cap"] = encode_heritage(r.cap)
            for g in self.groups:
                attrs[f"row.{r.name}.rights.{g}"] = r.group_rights.get(g, DENY_ALL)
        return canonical_encode(attrs)

    @classmethod
    def decode(cls, raw: bytes) -> "DirectoryTable":
        a = canonical_decode(raw)
        groups = [a[f"groups.{i}"] for i in range(a["groups.count"])]
        rows = []
        for i in range(a["rows.count"]):
            name = a[f"rows.{i}"]
            rights = {g: a[f"row.{name}.rights.{g}"] for g in groups}
            rows.append(Row(name, decode_heritage(a[f"row.{name}.cap"]), rights))
        return cls(rows=rows, groups=groups)


def check_group_name(g: str) -> None:
    if not g or "." in g or "," in g or g in RESERVED_COLUMNS:
        raise ValueError(f"invalid group name {g!r}")


def check_row_name(name: str) -> None:
    if not isinstance(name, str) or not name or "/" in name:
        raise ValueError(f"invalid row name {name!r}")


def is_directory(h: Heritage) -> bool:
    return h.first.attrs.get("objectKind") == DIRECTORY_KIND


# -- server side --------------------------------------------------------------

DIRECTORY_VERBS = ("LOOKUP", "CHMOD", "INSERT", "REMOVE", "LIST")


def _parses(src) -> bool:
    try:
        parse_program(src)
    except (RFLSyntaxError, TypeError):
        return False
    return True


def handle_directory_request(
    table: DirectoryTable, r: RequestCert, service_key: KeyPair
) -> tuple[Response, bool]:
    """Execute an already-authorized directory verb.

    Returns the response and whether the table was modified.
    """
    kind = r.attrs.get("type")
    a = r.attrs

    if kind == "LOOKUP":
        row = table.row(a.get("name"))
        if row is None:
            return P.error_response(P.NOT_FOUND, P.NO_SUCH_NAME), False
        group = a.get("group")
        if group not in table.groups:
            return P.error_response(P.NOT_FOUND, P.NO_SUCH_GROUP), False
        tail = row.cap.last
        if tail.p_length == 0:
            return P.error_response(P.BAD_REQUEST, P.DEPTH_EXHAUSTED), False
        extended = delegate(
            Codecap(row.cap, service_key),
            a["signerPubkey"],
            row.group_rights.get(group, DENY_ALL),
            tail.p_length - 1,
        )
        return Response(P.OK, encode_heritage(extended).encode()), False

    if kind == "CHMOD":
        row = table.row(a.get("row"))
        if row is None:
            return P.error_response(P.NOT_FOUND, P.NO_SUCH_NAME), False
        if a.get("group") not in table.groups:
            return P.error_response(P.NOT_FOUND, P.NO_SUCH_GROUP), False
        src = a.get("value")
        if not isinstance(src, str) or not _parses(src):
            return P.error_response(P.BAD_REQUEST, "rights function does not parse"), False
        row.group_rights[a["group"]] = src
        return Response(P.OK), True

    if kind == "INSERT":
        name = a.get("name")
        try:
            check_row_name(name)
            cap = decode_heritage(a.get("cap", ""))
        except (ValueError, HeritageDecodeError, EncodingError) as exc:
            return P.error_response(P.BAD_REQUEST, f"{P.MALFORMED}: {exc}"), False
        if cap.last.attrs.get("pubkey") != service_key.public_hex:
            return P.error_response(P.BAD_REQUEST, P.FOREIGN_CAP), False
        if not validate_heritage(cap.root_pubkey, cap).ok:
            return P.error_response(P.BAD_REQUEST, f"{P.MALFORMED}: stored cap does not validate"), False
        rights = {}
        for key, src in a.items():
            if not key.startswith("rights."):
                continue
            g = key[len("rights."):]
            if g not in table.groups:
                return P.error_response(P.NOT_FOUND, P.NO_SUCH_GROUP), False
            if not isinstance(src, str) or not _parses(src):
                return P.error_response(P.BAD_REQUEST, "rights function does not parse"), False
            rights[g] = src
        table.put(Row(name, cap, {g: rights.get(g, DENY_ALL) for g in table.groups}))
        return Response(P.OK), True

    if kind == "REMOVE":
        if not table.remove(a.get("name")):
            return P.error_response(P.NOT_FOUND, P.NO_SUCH_NAME), False
        return Response(P.OK), True

    if kind == "LIST":
        body = {"groups": list(table.groups), "rows": [r.name for r in table.rows]}
        return Response(P.OK, json.dumps(body).encode()), False

    return P.error_response(P.BAD_REQUEST, P.UNSUPPORTED), False


# -- client side --------------------------------------------------------------


def _call(net, dc: Codecap, attrs: Mapping, now: Optional[int] = None) -> Response:
    resp = network_call(net, dc, attrs, now=now)
    if not resp.ok:
        raise DirectoryError(resp)
    return resp


def dir_lookup(net, dc: Codecap, name: str, group: str, *, now: Optional[int] = None) -> Heritage:
    """Look ``name`` up in ``group``; the result is delegated to ``dc``'s key."""
    resp = _call(net, dc, {"type": "LOOKUP", "name": name, "group": group}, now)
    return decode_heritage(resp.text())


def dir_chmod(net, dc: Codecap, name: str, group: str, rights_src: str) -> None:
    if not _parses(rights_src):
        raise ValueError("rights function does not parse")
    _call(net, dc, {"type": "CHMOD", "row": name, "group": group, "value": rights_src})


def dir_insert(net, dc: Codecap, name: str, cap: Heritage, group_rights: Mapping[str, str]) -> None:
    attrs = {"type": "INSERT", "name": name, "cap": encode_heritage(cap)}
    for g, src in group_rights.items():
        attrs[f"rights.{g}"] = src
    _call(net, dc, attrs)


def dir_remove(net, dc: Codecap, name: str) -> None:
    _call(net, dc, {"type": "REMOVE", "name": name})


def dir_list(net, dc: Codecap) -> list[tuple[str, list[str]]]:
    body = json.loads(_call(net, dc, {"type": "LIST"}).text())
    return [(name, list(body["groups"])) for name in body["rows"]]


@dataclass(frozen=True)
class ClientDirState:
    home: Codecap
    working: Optional[Codecap] = None

    def __post_init__(self):
        if self.working is None:
            object.__setattr__(self, "working", self.home)

    @property
    def key(self) -> KeyPair:
        return self.home.key


def split_path(path: str) -> tuple[bool, list[str]]:
    if not path:
        raise ValueError("empty path")
    return path.startswith("/"), [c for c in path.split("/") if c]


def resolve_path(net, st: ClientDirState, path: str, group: str) -> Heritage:
    """Walk ``path`` one lookup per component, all in the same group column."""
    absolute, parts = split_path(path)
    cur = st.home if absolute else st.working
    for i, part in enumerate(parts, start=1):
        if not is_directory(cur.heritage):
            raise PathError(i, "not a directory")
        try:
            h = dir_lookup(net, cur, part, group)
        except (ServiceError, ConnectionError, HeritageDecodeError) as exc:
            raise PathError(i, str(exc), exc) from exc
        cur = Codecap(h, st.key)
    return cur.heritage


def chdir(net, st: ClientDirState, path: str, group: str) -> ClientDirState:
    h = resolve_path(net, st, path, group)
    if not is_directory(h):
        _, parts = split_path(path)
        raise PathError(max(len(parts), 1), "not a directory")
    return replace(st, working=Codecap(h, st.key))
