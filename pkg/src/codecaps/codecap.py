"""Minting, delegation, confinement, amplification and the authorization decision."""

from __future__ import annotations

import hashlib
import secrets
import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

from .certchain import (
    Certificate,
    Heritage,
    KeyPair,
    RequestCert,
    ValidationReport,
    canonical_encode,
    sign_certificate,
    sign_request_attrs,
    validate_heritage,
)
from .rights import (
    DEFAULT_BUDGET,
    EvalContext,
    EvalOutcome,
    attrs_record,
    certificate_view,
    evaluate,
    parse_program,
)

PubKey = Union[bytes, str]

STAGE_NONE = "none"
STAGE_TRANSPORT = "transport_binding"
STAGE_HERITAGE = "heritage"
STAGE_REQUEST_SIGNATURE = "request_signature"
STAGE_VERSION = "version"
STAGE_RIGHTS = "rights"


class CodecapError(ValueError):
    pass


class DelegationDepthExhausted(CodecapError):
    def __init__(self):
        super().__init__("delegation depth exhausted")


class KeyNotOnHeritage(CodecapError):
    def __init__(self):
        super().__init__("key not on heritage")


def _hex(key: PubKey) -> str:
    if isinstance(key, (bytes, bytearray)):
        return bytes(key).hex()
    return key


@dataclass(frozen=True)
class Codecap:
    """A heritage paired with the private key of its last subject."""

    heritage: Heritage
    key: KeyPair = field(repr=False)

    def __post_init__(self):
        if self.heritage.last.pubkey != self.key.public_hex:
            raise CodecapError("private key does not match the last certificate")

    @property
    def private_key(self) -> bytes:
        return self.key.private_key

    @property
    def public_hex(self) -> str:
        return self.key.public_hex

    @property
    def root_pubkey(self) -> str:
        return self.heritage.root_pubkey


@dataclass(frozen=True)
class Decision:
    allowed: bool
    failing_stage: str = STAGE_NONE
    failing_index: Optional[int] = None  # 1-based certificate for rights/heritage stages
    rights_outcomes: tuple = ()
    report: Optional[ValidationReport] = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.allowed

    @property
    def stage_code(self) -> str:
        if self.failing_stage == STAGE_RIGHTS:
            return f"rights({self.failing_index})"
        return self.failing_stage


def _serial(attrs: Mapping, parent: Optional[Certificate]) -> str:
    # deterministic: identical inputs yield the identical certificate
    h = hashlib.sha256(canonical_encode(attrs))
    if parent is not None:
        h.update(parent.signature)
    return h.hexdigest()[:32]


def _cert_attrs(subject_pub, issuer: KeyPair, rights_src, p_length, extra) -> dict:
    try:
        parse_program(rights_src)
    except (ValueError, TypeError) as exc:
        raise CodecapError(f"rights function does not parse: {exc}") from exc
    if not isinstance(p_length, int) or isinstance(p_length, bool) or p_length < 0:
        raise CodecapError("pLength must be a nonnegative integer")
    attrs = {
        "pubkey": _hex(subject_pub),
        "issuerPubkey": issuer.public_hex,
        "rights": rights_src,
        "pLength": p_length,
    }
    for k, v in extra.items():
        if v is not None:
            attrs[k] = v
    return attrs


def mint_root(
    service_key: KeyPair,
    subject_pub: PubKey,
    rights_src: str,
    p_length: int,
    object_id: Optional[str] = None,
    version: Optional[int] = None,
    *,
    subject_name: Optional[str] = None,
    not_before: Optional[int] = None,
    not_after: Optional[int] = None,
    extra: Optional[Mapping] = None,
) -> Heritage:
    """Issue a fresh one-certificate heritage signed by the service key.

    ``object_id`` and ``version`` may be omitted for service-wide caps such
    as factory caps; the version gate then does not apply.
    """
    attrs = _cert_attrs(
        subject_pub,
        service_key,
        rights_src,
        p_length,
        {
            "objectId": object_id,
            "version": version,
            "subjectName": subject_name,
            "notBefore": not_before,
            "notAfter": not_after,
            **(extra or {}),
        },
    )
    attrs["serial"] = _serial(attrs, None)
    return Heritage((sign_certificate(attrs, service_key),))


def delegate(
    c: Codecap,
    target_pub: PubKey,
    rights_src: str,
    p_length: int,
    *,
    subject_name: Optional[str] = None,
    not_before: Optional[int] = None,
    not_after: Optional[int] = None,
) -> Heritage:
    """Extend ``c``'s heritage by one certificate for ``target_pub``.

    Only the heritage comes back; the recipient pairs it with its own key.
    """
    tail = c.heritage.last
    if tail.pubkey != c.key.public_hex:
        raise CodecapError("private key does not match the last certificate")
    if tail.p_length == 0:
        raise DelegationDepthExhausted()
    if not isinstance(p_length, int) or p_length >= tail.p_length:
        raise CodecapError(f"pLength must be below {tail.p_length}")
    attrs = _cert_attrs(
        target_pub,
        c.key,
        rights_src,
        p_length,
        {"subjectName": subject_name, "notBefore": not_before, "notAfter": not_after},
    )
    attrs["serial"] = _serial(attrs, tail)
    return c.heritage.extend(sign_certificate(attrs, c.key))


def confine(rights_src: str) -> str:
    try:
        parse_program(rights_src)
    except (ValueError, TypeError) as exc:
        raise CodecapError(f"rights function does not parse: {exc}") from exc
    return f"(isLast) && ({rights_src})"


def amplify(h: Heritage, holder: KeyPair) -> Codecap:
    """Cut ``h`` back to the holder's own (deepest) certificate."""
    for i in range(len(h) - 1, -1, -1):
        if h.certs[i].pubkey == holder.public_hex:
            return Codecap(h.prefix(i + 1), holder)
    raise KeyNotOnHeritage()


def sign_request(
    c: Codecap,
    attrs: Mapping,
    *,
    now: Optional[int] = None,
    nonce: Optional[str] = None,
) -> RequestCert:
    if "type" not in attrs:
        raise CodecapError("request has no type")
    attrs = dict(attrs)
    attrs["signerPubkey"] = c.key.public_hex
    attrs.setdefault("nonce", nonce or secrets.token_hex(16))
    attrs.setdefault("timestamp", int(time.time()) if now is None else now)
    return sign_request_attrs(attrs, c.key)


def request_record(r: RequestCert) -> dict:
    return attrs_record(r.attrs)


def heritage_views(h: Heritage) -> list:
    return [certificate_view(c.attrs) for c in h.certs]


def authorize(
    root_pub: PubKey,
    h: Heritage,
    r: RequestCert,
    transport_pub: Optional[PubKey] = None,
    now: Optional[int] = None,
    state: Optional[Mapping] = None,
    budget: int = DEFAULT_BUDGET,
    *,
    current_version: Optional[int] = None,
    allow_unauthenticated: bool = False,
) -> Decision:
    """Decide whether ``r``, presented with ``h``, may execute at the root service.

    Stages run in order and stop at the first failure: transport binding,
    heritage validity, request signature, object version (only when C_1
    carries one and ``current_version`` is known), then every rights
    function with ``idx`` set to its certificate's 0-based position.
    """
    if now is None:
        now = int(time.time())
    tail = h.last.attrs.get("pubkey")

    if transport_pub is None:
        if not allow_unauthenticated:
            return Decision(False, STAGE_TRANSPORT, detail="no authenticated transport key")
    elif _hex(transport_pub) != tail:
        return Decision(False, STAGE_TRANSPORT, detail="transport key is not the heritage tail")

    report = validate_heritage(root_pub, h, now=now)
    if not report.ok:
        return Decision(False, STAGE_HERITAGE, report.index, report=report, detail=str(report))

    if r.attrs.get("signerPubkey") != tail or not r.verify():
        return Decision(False, STAGE_REQUEST_SIGNATURE, report=report, detail="request not signed by the heritage tail")

    cert_version = h.first.attrs.get("version")
    if cert_version is not None and current_version is not None and cert_version != current_version:
        return Decision(
            False, STAGE_VERSION, report=report,
            detail=f"cap is for version {cert_version}, object is at {current_version}",
        )

    views = heritage_views(h)
    request = request_record(r)
    outcomes = []
    for i, cert in enumerate(h.certs):
        ctx = EvalContext(heritage=views, idx=i, request=request, now=now, state=state)
        outcome: EvalOutcome = evaluate(cert.rights, ctx, budget)
        outcomes.append(outcome)
        if not outcome.allowed:
            return Decision(
                False, STAGE_RIGHTS, i + 1, tuple(outcomes), report,
                detail=f"rights function {i + 1} denied ({outcome.cause})",
            )
    return Decision(True, STAGE_NONE, None, tuple(outcomes), report)


def conjoin(sources) -> str:
    return " && ".join(f"({s})" for s in sources)
