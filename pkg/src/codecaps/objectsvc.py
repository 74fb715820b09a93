"""The object service run by a root principal.

Objects are opaque byte payloads (or directory tables) with a version
number and optional primary links.  Every request goes through
:func:`~codecaps.codecap.authorize` before it is dispatched on its type.
"""

from __future__ import annotations

import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

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
    parse_pubkey,
    validate_heritage,
)
from .codecap import Codecap, Decision, authorize, conjoin, mint_root
from .directory import (
    DIRECTORY_KIND,
    DIRECTORY_VERBS,
    DirectoryError,
    DirectoryTable,
    Row,
    check_group_name,
    dir_lookup,
    handle_directory_request,
)
from .protocol import Response, ServiceError, TransportError
from .rights import DEFAULT_BUDGET, RFLSyntaxError, parse_program

log = logging.getLogger(__name__)

BLOB_KIND = "blob"
_RUN_GC = object()
LOST_FOUND_GROUP = "admin"


@dataclass
class PrimaryLink:
    directory_heritage: Heritage
    row_name: str
    group: str


@dataclass
class ObjectRecord:
    object_id: str
    version: int = 0
    state: bytes = b""
    primary_links: list = field(default_factory=list)
    created_at: int = 0
    kind: str = BLOB_KIND

    def to_bytes(self) -> bytes:
        attrs = {
            "objectId": self.object_id,
            "version": self.version,
            "state": self.state,
            "createdAt": self.created_at,
            "kind": self.kind,
            "links.count": len(self.primary_links),
        }
        for i, link in enumerate(self.primary_links):
            attrs[f"link.{i}.heritage"] = encode_heritage(link.directory_heritage)
            attrs[f"link.{i}.row"] = link.row_name
            attrs[f"link.{i}.group"] = link.group
        return canonical_encode(attrs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ObjectRecord":
        a = canonical_decode(raw)
        links = [
            PrimaryLink(decode_heritage(a[f"link.{i}.heritage"]), a[f"link.{i}.row"], a[f"link.{i}.group"])
            for i in range(a["links.count"])
        ]
        return cls(a["objectId"], a["version"], a["state"], links, a["createdAt"], a["kind"])


@dataclass
class ServiceConfig:
    service_key: KeyPair
    subject: str = "codecap-service"
    step_budget: int = DEFAULT_BUDGET
    gc_period: int = 3600
    allow_unauthenticated_transport: bool = False
    lost_found_directory: Optional[str] = None
    replay_window: int = 300
    state_request_types: frozenset = frozenset({"READ", "WRITE"})
    # well-known (yellow pages) rows: name -> rights of the factory cap stored there
    yellow_pages: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.step_budget < 1:
            raise ValueError("step_budget must be >= 1")
        if self.gc_period <= 0:
            raise ValueError("gc_period must be > 0")


@dataclass
class SweepReport:
    persisted: list = field(default_factory=list)
    destroyed: list = field(default_factory=list)
    moved_to_lost_found: list = field(default_factory=list)


def state_record(state: bytes) -> dict:
    rec = {"length": len(state)}
    try:
        rec["body"] = state.decode("utf-8")
    except UnicodeDecodeError:
        pass
    return rec


def _int_attr(a, name, default=None):
    v = a.get(name, default)
    if v is default:
        return v
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"{name} must be an integer")
    return v


class ObjectService:
    """Object store plus request dispatch for one root key.

    All request handling is serialized by one lock.  ``network`` is used
    only for outbound calls (garbage-collection lookups through primary
    links).  ``clock`` returns seconds since the epoch.
    """

    def __init__(
        self,
        config: ServiceConfig,
        store_dir=None,
        network=None,
        clock: Callable[[], float] = time.time,
    ):
        self.config = config
        self.network = network
        self.clock = clock
        self.store_dir = Path(store_dir) if store_dir is not None else None
        self.objects: dict[str, ObjectRecord] = {}
        self.destroyed_ids: set = set()
        self._nonces: dict = {}
        self._lock = threading.RLock()
        if self.store_dir is not None:
            self.store_dir.mkdir(parents=True, exist_ok=True)
            self._load()
        self.lost_found_id = self._ensure_directory(config.lost_found_directory, "lost+found", [LOST_FOUND_GROUP])
        self.yellow_pages_id = None
        if config.yellow_pages:
            self.yellow_pages_id = self._seed_yellow_pages(config.yellow_pages)

    # -- identity ---------------------------------------------------------

    @property
    def service_key(self) -> KeyPair:
        return self.config.service_key

    @property
    def pubkey(self) -> str:
        return self.config.service_key.public_hex

    @property
    def realm(self) -> str:
        return self.config.subject

    def now(self) -> int:
        return int(self.clock())

    # -- persistence ------------------------------------------------------

    def _path(self, oid: str) -> Path:
        return self.store_dir / f"{oid}.obj"

    def _save(self, rec: ObjectRecord) -> None:
        if self.store_dir is None:
            return
        tmp = self.store_dir / f".{rec.object_id}.obj.tmp"
        with open(tmp, "wb") as fh:
            fh.write(rec.to_bytes())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._path(rec.object_id))

    def _unlink(self, oid: str) -> None:
        if self.store_dir is None:
            return
        try:
            self._path(oid).unlink()
        except FileNotFoundError:
            pass
        with open(self.store_dir / "destroyed.log", "a") as fh:
            fh.write(oid + "\n")

    def _load(self) -> None:
        log_path = self.store_dir / "destroyed.log"
        if log_path.exists():
            self.destroyed_ids.update(ln.strip() for ln in log_path.read_text().splitlines() if ln.strip())
        for path in sorted(self.store_dir.glob("*.obj")):
            try:
                rec = ObjectRecord.from_bytes(path.read_bytes())
            except (EncodingError, HeritageDecodeError, KeyError, ValueError) as exc:
                log.warning("ignoring unreadable object file %s: %s", path.name, exc)
                continue
            if rec.object_id == path.stem:
                self.objects[rec.object_id] = rec

    # -- local administration ----------------------------------------------

    def new_object(self, kind: str = BLOB_KIND, state: bytes = b"", groups=()) -> str:
        """Create an object directly (operator bootstrap, no authorization)."""
        if kind == DIRECTORY_KIND:
            state = DirectoryTable(groups=list(groups)).encode()
        elif kind != BLOB_KIND:
            raise ValueError(f"unknown object kind {kind!r}")
        with self._lock:
            oid = uuid.uuid4().hex
            while oid in self.objects or oid in self.destroyed_ids:  # pragma: no cover
                oid = uuid.uuid4().hex
            rec = ObjectRecord(oid, 0, bytes(state), [], self.now(), kind)
            self.objects[oid] = rec
            self._save(rec)
        return oid

    def mint(self, subject_pub, rights_src: str, p_length: int, object_id: Optional[str] = None, **kw) -> Heritage:
        """Mint a root heritage at the object's current version."""
        version = None
        extra = {}
        if object_id is not None:
            rec = self.objects[object_id]
            version = rec.version
            if rec.kind == DIRECTORY_KIND:
                extra["objectKind"] = DIRECTORY_KIND
        return mint_root(self.service_key, subject_pub, rights_src, p_length, object_id, version, extra=extra, **kw)

    def get(self, object_id: str) -> Optional[ObjectRecord]:
        return self.objects.get(object_id)

    def read_table(self, object_id: str) -> DirectoryTable:
        return DirectoryTable.decode(self.objects[object_id].state)

    def add_primary_link(self, object_id: str, link: PrimaryLink) -> None:
        with self._lock:
            rec = self.objects[object_id]
            rec.primary_links.append(link)
            self._save(rec)

    def destroy(self, object_id: str) -> bool:
        with self._lock:
            rec = self.objects.pop(object_id, None)
            if rec is None:
                return False
            self.destroyed_ids.add(object_id)
            self._unlink(object_id)
            return True

    def _ensure_directory(self, oid: Optional[str], label: str, groups) -> str:
        if oid is not None and oid in self.objects:
            return oid
        if self.store_dir is not None:
            marker = self.store_dir / f"{label}.id"
            if marker.exists():
                existing = marker.read_text().strip()
                if existing in self.objects:
                    return existing
        new_id = self.new_object(DIRECTORY_KIND, groups=groups)
        if oid is not None:
            # keep the configured id
            rec = self.objects.pop(new_id)
            rec.object_id = oid
            self.objects[oid] = rec
            self._unlink_quiet(new_id)
            self._save(rec)
            new_id = oid
        if self.store_dir is not None:
            (self.store_dir / f"{label}.id").write_text(new_id + "\n")
        return new_id

    def _unlink_quiet(self, oid):
        if self.store_dir is not None:
            try:
                self._path(oid).unlink()
            except FileNotFoundError:
                pass

    def _seed_yellow_pages(self, rows: Mapping[str, str]) -> str:
        oid = self._ensure_directory(None, "yellow-pages", ["public"])
        table = self.read_table(oid)
        for name, rights in rows.items():
            cap = mint_root(self.service_key, self.pubkey, rights, 8)
            table.put(Row(name, cap, {"public": rights}))
        self._write_table(oid, table)
        return oid

    def _write_table(self, oid: str, table: DirectoryTable) -> None:
        rec = self.objects[oid]
        rec.state = table.encode()
        self._save(rec)

    # -- request handling -------------------------------------------------

    def _deny(self, d: Decision) -> Response:
        return P.error_response(P.FORBIDDEN, d.detail or "denied", d.stage_code)

    def _check_fresh(self, r: RequestCert, now: int) -> Optional[Response]:
        ts = r.attrs.get("timestamp")
        w = self.config.replay_window
        if isinstance(ts, bool) or not isinstance(ts, int) or abs(ts - now) > w:
            return P.error_response(P.BAD_REQUEST, P.STALE)
        key = (r.attrs.get("signerPubkey"), r.attrs.get("nonce"))
        for k in [k for k, seen in self._nonces.items() if seen < now - 2 * w]:
            del self._nonces[k]
        if key in self._nonces:
            return P.error_response(P.CONFLICT, P.REPLAY)
        self._nonces[key] = now
        return None

    def handle_request(
        self,
        h: Heritage,
        r: RequestCert,
        transport_pub=None,
        payload: bytes = b"",
    ) -> Response:
        """Authorize and execute one request.  Never raises for client faults."""
        with self._lock:
            try:
                resp = self._handle(h, r, transport_pub, payload)
            except (ValueError, TypeError, KeyError) as exc:
                return P.error_response(P.BAD_REQUEST, f"{P.MALFORMED}: {exc}")
        if resp is _RUN_GC:
            # outside the lock: the sweep makes outbound calls, possibly to us
            report = self.gc_sweep()
            body = "\n".join(
                [f"persisted {o}" for o in report.persisted]
                + [f"destroyed {o}" for o in report.destroyed]
                + [f"lost+found {o}" for o in report.moved_to_lost_found]
            )
            return Response(P.OK, body.encode())
        return resp

    def _handle(self, h, r, transport_pub, payload) -> Response:
        now = self.now()
        oid = h.first.attrs.get("objectId")
        rec = self.objects.get(oid) if oid is not None else None
        rtype = r.attrs.get("type")

        if oid is not None and rec is None:
            # don't reveal existence to holders of invalid caps
            d = authorize(
                self.pubkey, h, r, transport_pub, now, None, self.config.step_budget,
                allow_unauthenticated=self.config.allow_unauthenticated_transport,
            )
            if d.failing_stage in ("transport_binding", "heritage", "request_signature"):
                return self._deny(d)
            return P.error_response(P.NOT_FOUND, P.UNKNOWN_OBJECT)

        state = None
        if rec is not None and rec.kind == BLOB_KIND and rtype in self.config.state_request_types:
            state = state_record(rec.state)
        d = authorize(
            self.pubkey, h, r, transport_pub, now, state, self.config.step_budget,
            current_version=rec.version if rec is not None else None,
            allow_unauthenticated=self.config.allow_unauthenticated_transport,
        )
        if not d.allowed:
            return self._deny(d)
        stale = self._check_fresh(r, now)
        if stale is not None:
            return stale

        if rtype == "CREATE":
            return self._create(h, r)
        if rtype == "DELEGATEONBEHALF":
            return self._delegate_on_behalf(h, r, rec)
        if rtype == "GCSWEEP" and rec is None:
            return _RUN_GC
        if rec is None:
            return P.error_response(P.BAD_REQUEST, P.UNSUPPORTED)

        if rtype == "DESTROY":
            self.destroy(rec.object_id)
            return Response(P.OK)
        if rtype == "BUMPVERSION":
            return self._bump(h, r, rec)
        if rtype == "REGISTERLINK":
            return self._register_link(r, rec)

        if rec.kind == DIRECTORY_KIND:
            if rtype not in DIRECTORY_VERBS:
                return P.error_response(P.BAD_REQUEST, P.UNSUPPORTED)
            table = DirectoryTable.decode(rec.state)
            resp, changed = handle_directory_request(table, r, self.service_key)
            if changed:
                self._write_table(rec.object_id, table)
            return resp

        if rtype == "READ":
            offset = _int_attr(r.attrs, "offset", 0)
            length = _int_attr(r.attrs, "length", None)
            if offset < 0 or (length is not None and length < 0):
                raise ValueError("offset and length must be nonnegative")
            end = len(rec.state) if length is None else offset + length
            return Response(P.OK, rec.state[offset:end])
        if rtype == "WRITE":
            value = r.attrs.get("value", payload)
            if isinstance(value, str):
                value = value.encode("utf-8")
            if not isinstance(value, bytes):
                raise ValueError("value must be a string or bytes")
            offset = _int_attr(r.attrs, "offset", None)
            if offset is None:
                rec.state = value
            else:
                if not 0 <= offset <= len(rec.state):
                    raise ValueError("offset beyond end of object")
                rec.state = rec.state[:offset] + value + rec.state[offset + len(value):]
            self._save(rec)
            return Response(P.OK)
        return P.error_response(P.BAD_REQUEST, P.UNSUPPORTED)

    def _create(self, h: Heritage, r: RequestCert) -> Response:
        a = r.attrs
        rights = a.get("rightsForCreator")
        p_length = _int_attr(a, "pLength", 0)
        kind = a.get("kind", BLOB_KIND)
        groups = [g for g in str(a.get("groups", "")).split(",") if g]
        try:
            parse_program(rights)
            for g in groups:
                check_group_name(g)
        except (RFLSyntaxError, TypeError, ValueError) as exc:
            return P.error_response(P.BAD_REQUEST, f"{P.MALFORMED}: {exc}")
        if p_length < 0 or kind not in (BLOB_KIND, DIRECTORY_KIND):
            return P.error_response(P.BAD_REQUEST, P.MALFORMED)
        oid = self.new_object(kind, groups=groups)
        heritage = self.mint(a["signerPubkey"], rights, p_length, oid)
        return Response(P.OK, encode_heritage(heritage).encode(), headers={"Object-Id": oid})

    def _reminted(self, h: Heritage, subject_pub: str, rights: list, p_length: int, rec) -> Heritage:
        extra = {}
        kind = h.first.attrs.get("objectKind")
        if kind is not None:
            extra["objectKind"] = kind
        return mint_root(
            self.service_key,
            subject_pub,
            conjoin(rights),
            p_length,
            rec.object_id if rec is not None else None,
            rec.version if rec is not None else None,
            extra=extra,
        )

    def _bump(self, h: Heritage, r: RequestCert, rec: ObjectRecord) -> Response:
        rec.version += 1
        self._save(rec)
        fresh = self._reminted(h, r.signer_pubkey, [c.rights for c in h], h.last.p_length, rec)
        return Response(P.OK, encode_heritage(fresh).encode(), headers={"Version": str(rec.version)})

    def _delegate_on_behalf(self, h: Heritage, r: RequestCert, rec) -> Response:
        a = r.attrs
        try:
            target = parse_pubkey(str(a.get("targetPubkey", ""))).hex()
        except ValueError as exc:
            return P.error_response(P.BAD_REQUEST, f"{P.MALFORMED}: {exc}")
        rights = a.get("rights")
        try:
            parse_program(rights)
        except (RFLSyntaxError, TypeError) as exc:
            return P.error_response(P.BAD_REQUEST, f"{P.MALFORMED}: {exc}")
        p_length = _int_attr(a, "pLength", 0)
        # the new cap stands beside the holder's, so it may go as deep, no deeper
        if p_length < 0 or p_length > h.last.p_length:
            return P.error_response(P.BAD_REQUEST, "pLength exceeds the holder's remaining depth")
        fresh = self._reminted(h, target, [c.rights for c in h] + [rights], p_length, rec)
        return Response(P.OK, encode_heritage(fresh).encode())

    def _register_link(self, r: RequestCert, rec: ObjectRecord) -> Response:
        a = r.attrs
        try:
            dh = decode_heritage(a["directoryHeritage"])
        except (KeyError, HeritageDecodeError, EncodingError) as exc:
            return P.error_response(P.BAD_REQUEST, f"{P.MALFORMED}: {exc}")
        if dh.last.attrs.get("pubkey") != self.pubkey:
            return P.error_response(P.BAD_REQUEST, "link heritage must be delegated to this service")
        report = validate_heritage(dh.root_pubkey, dh)
        if not report.ok:
            return P.error_response(P.BAD_REQUEST, f"link heritage does not validate: {report}")
        rec.primary_links.append(PrimaryLink(dh, str(a["row"]), str(a["group"])))
        self._save(rec)
        return Response(P.OK)

    # -- garbage collection -----------------------------------------------

    def _link_status(self, oid: str, link: PrimaryLink, now: int) -> str:
        """live | missing | dangling | unknown"""
        if self.network is None:
            return "unknown"
        try:
            found = dir_lookup(self.network, Codecap(link.directory_heritage, self.service_key), link.row_name, link.group, now=now)
        except TransportError:
            return "unknown"
        except DirectoryError as exc:
            if exc.error == P.UNKNOWN_OBJECT:
                return "dangling"
            if exc.error == P.NO_SUCH_NAME:
                return "missing"
            return "unknown"
        except (ServiceError, HeritageDecodeError, ValueError):
            return "unknown"
        if found.object_id == oid and found.root_pubkey == self.pubkey:
            return "live"
        return "missing"

    def gc_sweep(self, now: Optional[int] = None) -> SweepReport:
        """Check every linked object's primary links and act on the result.

        An object persists if any link is live or cannot be checked.  If
        every link answers and none refers to the object it is destroyed;
        links into directories that no longer exist are re-registered
        under lost+found instead.
        """
        now = self.now() if now is None else now
        report = SweepReport()
        for oid in sorted(self.objects):
            rec = self.objects.get(oid)
            if rec is None or not rec.primary_links:
                continue
            statuses = [self._link_status(oid, link, now) for link in list(rec.primary_links)]
            if "live" in statuses or "unknown" in statuses:
                report.persisted.append(oid)
            elif "dangling" in statuses:
                self._move_to_lost_found(rec, statuses)
                report.moved_to_lost_found.append(oid)
            else:
                self.destroy(oid)
                report.destroyed.append(oid)
        return report

    def _move_to_lost_found(self, rec: ObjectRecord, statuses) -> None:
        with self._lock:
            lf = self.lost_found_id
            table = self.read_table(lf)
            cap = self.mint(self.pubkey, "true", 1, rec.object_id)
            table.put(Row(rec.object_id, cap, {g: "true" for g in table.groups}))
            self._write_table(lf, table)
            link_cap = self.mint(self.pubkey, 'request.type == "LOOKUP"', 1, lf)
            kept = [l for l, s in zip(rec.primary_links, statuses) if s != "dangling"]
            rec.primary_links = kept + [PrimaryLink(link_cap, rec.object_id, LOST_FOUND_GROUP)]
            self._save(rec)

    def start_gc(self, stop: Optional[threading.Event] = None) -> threading.Event:
        stop = stop or threading.Event()

        def loop():
            while not stop.wait(self.config.gc_period):
                try:
                    self.gc_sweep()
                except Exception:  # pragma: no cover - keep the sweeper alive
                    log.exception("gc sweep failed")

        threading.Thread(target=loop, daemon=True, name="codecap-gc").start()
        return stop

    # -- library-level wrappers ---------------------------------------------

    def _expect_heritage(self, resp: Response) -> Heritage:
        P.raise_for_status(resp)
        return decode_heritage(resp.text())

    def create_object(self, h: Heritage, r: RequestCert, transport_pub=None) -> Heritage:
        return self._expect_heritage(self.handle_request(h, r, transport_pub))

    def bump_version(self, h: Heritage, r: RequestCert, transport_pub=None) -> Heritage:
        return self._expect_heritage(self.handle_request(h, r, transport_pub))

    def delegate_on_behalf(self, h: Heritage, r: RequestCert, transport_pub=None) -> Heritage:
        return self._expect_heritage(self.handle_request(h, r, transport_pub))
