"""Certificates, heritages and their canonical encodings.

A certificate is a flat attribute map plus an Ed25519 signature over the
canonical encoding of that map.  A heritage is the ordered chain of
certificates C_1..C_n, each one issued by the subject key of the one
before it; C_1 is issued by the service (root) key.
"""

from __future__ import annotations

import base64
import binascii
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

AttrValue = Union[str, int, bool, bytes]

TAG_STR = 0x01
TAG_INT = 0x02
TAG_BOOL = 0x03
TAG_BYTES = 0x04

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

REQUIRED_CERT_ATTRS = ("pubkey", "issuerPubkey", "rights", "pLength", "serial")
REQUIRED_REQUEST_ATTRS = ("type", "signerPubkey", "nonce", "timestamp")

ARMOR_BEGIN = "-----BEGIN CODECAP CERT-----"
ARMOR_END = "-----END CODECAP CERT-----"
ARMOR_WIDTH = 64


class EncodingError(ValueError):
    """An attribute map cannot be canonically encoded or decoded."""


class CertificateError(ValueError):
    """A certificate could not be built (missing attribute, wrong issuer)."""


class HeritageDecodeError(ValueError):
    """Armored heritage text is malformed.  ``block`` is 1-based."""

    def __init__(self, block: int, message: str):
        super().__init__(f"block {block}: {message}")
        self.block = block
        self.message = message


# -- keys ---------------------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes = field(repr=False)

    @property
    def public_hex(self) -> str:
        return self.public_key.hex()

    def sign(self, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.private_key).sign(message)


def generate_keypair(seed: Optional[bytes] = None) -> KeyPair:
    """Create an Ed25519 key pair, deterministically when ``seed`` is given."""
    if seed is None:
        seed = os.urandom(32)
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != 32:
        raise ValueError("seed must be exactly 32 bytes")
    sk = Ed25519PrivateKey.from_private_bytes(bytes(seed))
    pk = sk.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return KeyPair(public_key=pk, private_key=bytes(seed))


def verify_signature(public_key: Union[bytes, str], message: bytes, signature: bytes) -> bool:
    try:
        if isinstance(public_key, str):
            public_key = bytes.fromhex(public_key)
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def parse_pubkey(text: str) -> bytes:
    """Decode a 64-hex-char public key, raising ValueError otherwise."""
    text = text.strip()
    if len(text) != 64:
        raise ValueError("public key must be 64 hex characters")
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise ValueError("public key must be 64 hex characters") from None


def write_keypair_file(path, kp: KeyPair) -> None:
    # owner-only from the moment of creation
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(kp.private_key.hex() + "\n" + kp.public_key.hex() + "\n")
    os.chmod(path, 0o600)


def read_keypair_file(path) -> KeyPair:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) != 2 or any(len(ln) != 64 for ln in lines):
        raise ValueError(f"{path}: expected private and public key, 64 hex chars each")
    kp = generate_keypair(bytes.fromhex(lines[0]))
    if kp.public_hex != lines[1].lower():
        raise ValueError(f"{path}: public key does not match private key")
    return kp


def read_pubkey_file(path) -> bytes:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    # a full key file also works: the public key is its last line
    return parse_pubkey(lines[-1])


# -- canonical encoding -------------------------------------------------------


def _tag(value: AttrValue) -> bytes:
    if isinstance(value, bool):
        return bytes([TAG_BOOL])
    if isinstance(value, int):
        return bytes([TAG_INT])
    if isinstance(value, str):
        return bytes([TAG_STR])
    if isinstance(value, (bytes, bytearray)):
        return bytes([TAG_BYTES])
    raise EncodingError(f"unsupported attribute value type {type(value).__name__}")


def canonical_encode(attrs: Mapping[str, AttrValue]) -> bytes:
    """Deterministic byte encoding of an attribute map.

    Entries are sorted by the UTF-8 bytes of their names.  Each entry is a
    one-byte type tag, a u32 name length, the name, then the value: strings
    and byte strings length-prefixed (u32), integers as 8-byte two's
    complement, booleans as one byte.  All lengths are big-endian.
    """
    entries = []
    for name, value in attrs.items():
        if not isinstance(name, str):
            raise EncodingError(f"attribute name {name!r} is not a string")
        try:
            raw_name = name.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise EncodingError(f"attribute name {name!r} is not valid UTF-8") from exc
        entries.append((raw_name, value))
    entries.sort(key=lambda e: e[0])

    out = bytearray()
    for raw_name, value in entries:
        out += _tag(value)
        out += struct.pack(">I", len(raw_name)) + raw_name
        if isinstance(value, bool):
            out.append(1 if value else 0)
        elif isinstance(value, int):
            if not INT64_MIN <= value <= INT64_MAX:
                raise EncodingError(f"integer attribute {raw_name!r} out of 64-bit range")
            out += struct.pack(">q", value)
        elif isinstance(value, str):
            try:
                raw = value.encode("utf-8")
            except UnicodeEncodeError as exc:
                raise EncodingError(f"attribute {raw_name!r} is not valid UTF-8") from exc
            out += struct.pack(">I", len(raw)) + raw
        else:
            out += struct.pack(">I", len(value)) + bytes(value)
    return bytes(out)


def _take(buf: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise EncodingError("truncated encoding")
    return buf[pos : pos + n], pos + n


def canonical_decode_prefix(buf: bytes) -> tuple[dict, int]:
    """Decode entries until a byte that is not a type tag; return (attrs, end)."""
    attrs: dict = {}
    pos = 0
    last_name = None
    while pos < len(buf) and buf[pos] in (TAG_STR, TAG_INT, TAG_BOOL, TAG_BYTES):
        tag = buf[pos]
        pos += 1
        raw_len, pos = _take(buf, pos, 4)
        raw_name, pos = _take(buf, pos, struct.unpack(">I", raw_len)[0])
        if last_name is not None and raw_name <= last_name:
            raise EncodingError("attributes not in canonical order")
        last_name = raw_name
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError("attribute name is not valid UTF-8") from exc
        if tag == TAG_BOOL:
            raw, pos = _take(buf, pos, 1)
            if raw[0] not in (0, 1):
                raise EncodingError(f"bad boolean for {name!r}")
            attrs[name] = raw[0] == 1
        elif tag == TAG_INT:
            raw, pos = _take(buf, pos, 8)
            attrs[name] = struct.unpack(">q", raw)[0]
        else:
            raw_len, pos = _take(buf, pos, 4)
            raw, pos = _take(buf, pos, struct.unpack(">I", raw_len)[0])
            if tag == TAG_STR:
                try:
                    attrs[name] = raw.decode("utf-8")
                except UnicodeDecodeError as exc:
                    raise EncodingError(f"attribute {name!r} is not valid UTF-8") from exc
            else:
                attrs[name] = raw
    return attrs, pos


def canonical_decode(buf: bytes) -> dict:
    attrs, end = canonical_decode_prefix(buf)
    if end != len(buf):
        raise EncodingError("trailing bytes after attribute map")
    return attrs


# -- certificates -------------------------------------------------------------


@dataclass(frozen=True)
class Certificate:
    attrs: dict
    signature: bytes

    def __getitem__(self, name: str) -> AttrValue:
        return self.attrs[name]

    def get(self, name: str, default=None):
        return self.attrs.get(name, default)

    @property
    def pubkey(self) -> str:
        return self.attrs["pubkey"]

    @property
    def issuer_pubkey(self) -> str:
        return self.attrs["issuerPubkey"]

    @property
    def rights(self) -> str:
        return self.attrs["rights"]

    @property
    def p_length(self) -> int:
        return self.attrs["pLength"]

    def to_bytes(self) -> bytes:
        return canonical_encode(self.attrs) + struct.pack(">I", len(self.signature)) + self.signature

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Certificate":
        attrs, end = canonical_decode_prefix(raw)
        sig_len_raw, pos = _take(raw, end, 4)
        sig, pos = _take(raw, pos, struct.unpack(">I", sig_len_raw)[0])
        if pos != len(raw):
            raise EncodingError("trailing bytes after signature")
        return cls(attrs=attrs, signature=sig)


@dataclass(frozen=True)
class RequestCert:
    attrs: dict
    signature: bytes

    def __getitem__(self, name: str) -> AttrValue:
        return self.attrs[name]

    def get(self, name: str, default=None):
        return self.attrs.get(name, default)

    @property
    def type(self) -> str:
        return self.attrs["type"]

    @property
    def signer_pubkey(self) -> str:
        return self.attrs["signerPubkey"]

    def verify(self) -> bool:
        signer = self.attrs.get("signerPubkey")
        if not isinstance(signer, str):
            return False
        try:
            message = canonical_encode(self.attrs)
        except EncodingError:
            return False
        return verify_signature(signer, message, self.signature)

    def to_bytes(self) -> bytes:
        return Certificate.to_bytes(self)  # same layout

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RequestCert":
        c = Certificate.from_bytes(raw)
        return cls(attrs=c.attrs, signature=c.signature)


def sign_certificate(attrs: Mapping[str, AttrValue], issuer: KeyPair) -> Certificate:
    missing = [a for a in REQUIRED_CERT_ATTRS if a not in attrs]
    if missing:
        raise CertificateError(f"missing required attribute(s): {', '.join(missing)}")
    if attrs["issuerPubkey"] != issuer.public_hex:
        raise CertificateError("issuerPubkey does not match the signing key")
    if not isinstance(attrs["pLength"], int) or isinstance(attrs["pLength"], bool) or attrs["pLength"] < 0:
        raise CertificateError("pLength must be a nonnegative integer")
    attrs = dict(attrs)
    return Certificate(attrs=attrs, signature=issuer.sign(canonical_encode(attrs)))


def sign_request_attrs(attrs: Mapping[str, AttrValue], signer: KeyPair) -> RequestCert:
    attrs = dict(attrs)
    missing = [a for a in REQUIRED_REQUEST_ATTRS if a not in attrs]
    if missing:
        raise CertificateError(f"request missing attribute(s): {', '.join(missing)}")
    if attrs["signerPubkey"] != signer.public_hex:
        raise CertificateError("signerPubkey does not match the signing key")
    return RequestCert(attrs=attrs, signature=signer.sign(canonical_encode(attrs)))


def verify_certificate(cert: Certificate) -> bool:
    issuer = cert.attrs.get("issuerPubkey")
    if not isinstance(issuer, str):
        return False
    try:
        message = canonical_encode(cert.attrs)
    except EncodingError:
        return False
    return verify_signature(issuer, message, cert.signature)


# -- heritages ----------------------------------------------------------------


@dataclass(frozen=True)
class Heritage:
    certs: tuple

    def __post_init__(self):
        object.__setattr__(self, "certs", tuple(self.certs))
        if not self.certs:
            raise ValueError("a heritage holds at least one certificate")

    def __len__(self) -> int:
        return len(self.certs)

    def __getitem__(self, i):
        return self.certs[i]

    def __iter__(self):
        return iter(self.certs)

    @property
    def first(self) -> Certificate:
        return self.certs[0]

    @property
    def last(self) -> Certificate:
        return self.certs[-1]

    @property
    def root_pubkey(self) -> str:
        return self.certs[0].attrs.get("issuerPubkey")

    @property
    def object_id(self) -> Optional[str]:
        return self.certs[0].attrs.get("objectId")

    def extend(self, cert: Certificate) -> "Heritage":
        return Heritage(self.certs + (cert,))

    def prefix(self, n: int) -> "Heritage":
        return Heritage(self.certs[:n])

    def encode(self) -> str:
        return encode_heritage(self)

    def __eq__(self, other):
        if not isinstance(other, Heritage):
            return NotImplemented
        return [c.to_bytes() for c in self.certs] == [c.to_bytes() for c in other.certs]

    def __hash__(self):
        return hash(tuple(c.to_bytes() for c in self.certs))


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    check: Optional[str] = None  # structure | root | chaining | plength | signature | validity
    index: Optional[int] = None  # 1-based certificate index
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return f"chain break at cert {self.index}: {self.reason}"


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def validate_heritage(root_pub, h: Heritage, now: Optional[int] = None) -> ValidationReport:
    """Check chaining, path lengths, signatures and validity windows.

    Certificates are examined in order; the report names the first failing
    check on the first bad certificate (1-based).
    """
    if isinstance(root_pub, (bytes, bytearray)):
        root_pub = bytes(root_pub).hex()
    if now is None:
        now = int(time.time())

    prev = None
    for i, cert in enumerate(h.certs, start=1):
        a = cert.attrs
        for name in REQUIRED_CERT_ATTRS:
            if name not in a:
                return ValidationReport(False, "structure", i, f"missing attribute {name}")
        if not all(isinstance(a[k], str) for k in ("pubkey", "issuerPubkey", "rights", "serial")):
            return ValidationReport(False, "structure", i, "attribute has the wrong type")
        if not _is_int(a["pLength"]):
            return ValidationReport(False, "plength", i, "pLength is not an integer")

        if prev is None:
            if a["issuerPubkey"] != root_pub:
                return ValidationReport(False, "root", i, "not issued by the root key")
        elif a["issuerPubkey"] != prev.attrs["pubkey"]:
            return ValidationReport(False, "chaining", i, "issuer is not the previous subject")

        if a["pLength"] < 0:
            return ValidationReport(False, "plength", i, "negative pLength")
        if prev is not None and not prev.attrs["pLength"] > a["pLength"]:
            return ValidationReport(False, "plength", i, "pLength does not decrease")

        if not verify_certificate(cert):
            return ValidationReport(False, "signature", i, "bad signature")

        nb, na = a.get("notBefore"), a.get("notAfter")
        if nb is not None and (not _is_int(nb) or now < nb):
            return ValidationReport(False, "validity", i, "not yet valid")
        if na is not None and (not _is_int(na) or now > na):
            return ValidationReport(False, "validity", i, "expired")
        prev = cert
    return ValidationReport(True)


# -- armor --------------------------------------------------------------------


def armor_block(raw: bytes) -> str:
    body = base64.b64encode(raw).decode("ascii")
    lines = [body[i : i + ARMOR_WIDTH] for i in range(0, len(body), ARMOR_WIDTH)]
    return "\n".join([ARMOR_BEGIN, *lines, ARMOR_END])


def encode_certificate(cert) -> str:
    return armor_block(cert.to_bytes())


def encode_heritage(h: Heritage) -> str:
    return "\n".join(encode_certificate(c) for c in h.certs) + "\n"


def dearmor(text: str) -> list[bytes]:
    """Split armored text into the raw bytes of each block."""
    blocks: list[bytes] = []
    current: Optional[list[str]] = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        index = len(blocks) + 1
        if line == ARMOR_BEGIN:
            if current is not None:
                raise HeritageDecodeError(index, "header inside an open block")
            current = []
        elif line == ARMOR_END:
            if current is None:
                raise HeritageDecodeError(index, "footer without a header")
            try:
                blocks.append(base64.b64decode("".join(current), validate=True))
            except (binascii.Error, ValueError):
                raise HeritageDecodeError(index, "bad base64") from None
            current = None
        elif current is None:
            raise HeritageDecodeError(index, f"unexpected line outside a block: {line[:20]!r}")
        else:
            current.append(line)
    if current is not None:
        raise HeritageDecodeError(len(blocks) + 1, "truncated block (no footer)")
    return blocks


def decode_certificate(text: str) -> Certificate:
    blocks = dearmor(text)
    if len(blocks) != 1:
        raise HeritageDecodeError(1, f"expected one block, found {len(blocks)}")
    return _parse_block(blocks[0], 1, Certificate)


def _parse_block(raw: bytes, index: int, cls):
    try:
        return cls.from_bytes(raw)
    except EncodingError as exc:
        raise HeritageDecodeError(index, str(exc)) from None


def decode_heritage(text: str) -> Heritage:
    blocks = dearmor(text)
    if not blocks:
        raise HeritageDecodeError(1, "no certificate blocks")
    return Heritage(tuple(_parse_block(b, i, Certificate) for i, b in enumerate(blocks, start=1)))


def encode_request(r: RequestCert) -> str:
    return encode_certificate(r)


def decode_request(text: str) -> RequestCert:
    blocks = dearmor(text)
    if len(blocks) != 1:
        raise HeritageDecodeError(1, f"expected one request block, found {len(blocks)}")
    return _parse_block(blocks[0], 1, RequestCert)


def heritage_from_certs(certs: Iterable[Certificate]) -> Heritage:
    return Heritage(tuple(certs))
