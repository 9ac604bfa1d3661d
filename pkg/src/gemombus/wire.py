"""Message framing and envelope serialization.

Frames are a 4-byte big-endian length prefix followed by one UTF-8 JSON
envelope.  Signatures cover a separate canonical form: sorted keys, no
whitespace, no ``sig`` field.
"""

from __future__ import annotations

import base64
import binascii
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional

DEFAULT_MAX_FRAME = 1 << 20
_LEN = struct.Struct(">I")
_U64_MAX = (1 << 64) - 1

KMF_REGISTER = "_gemom/kmf/register"
KMF_KEYREQ = "_gemom/kmf/keyreq"
KMF_REVOCATION = "_gemom/kmf/revocation"
KMF_PUBKEYS = "_gemom/kmf/pubkeys"
POLICY_EVOLUTION_PREFIX = "_gemom/policy/"
METRICS_PREFIX = "_gemom/metrics/"
ASM_CONTROL = "_gemom/asm/control"
SYSTEM_PREFIX = "_gemom/"

# the only system topics a client application may publish to
CLIENT_WRITABLE = frozenset({KMF_REGISTER, KMF_KEYREQ})


class WireError(Exception):
    pass


class FrameTooLarge(WireError):
    pass


class FramingError(WireError):
    pass


class ParseError(WireError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} at byte {offset}")
        self.offset = offset


def new_id(rng=None) -> str:
    """Random 128-bit identifier as 32 lowercase hex chars."""
    if rng is None:
        return os.urandom(16).hex()
    return f"{rng.getrandbits(128):032x}"


def metrics_topic(node: str, metric: str) -> str:
    return f"{METRICS_PREFIX}{node}/{metric}"


@dataclass(frozen=True)
class Encryption:
    key_id: str
    cipher: str
    nonce: bytes


@dataclass(frozen=True)
class Signature:
    signer: str
    signature: bytes


@dataclass(frozen=True)
class Envelope:
    id: str
    topic: str
    sender: str
    ts: int
    seq: Optional[int] = None
    headers: Mapping[str, str] = field(default_factory=dict)
    payload: bytes = b""
    enc: Optional[Encryption] = None
    sig: Optional[Signature] = None

    def __post_init__(self):
        if len(self.id) != 32:
            raise ValueError(f"envelope id must be 32 hex chars, got {self.id!r}")
        try:
            int(self.id, 16)
        except ValueError:
            raise ValueError(f"envelope id must be hex, got {self.id!r}") from None
        if not self.topic:
            raise ValueError("envelope topic is empty")
        if not isinstance(self.ts, int) or self.ts < 0:
            raise ValueError(f"bad timestamp {self.ts!r}")
        if self.seq is not None and not (0 <= self.seq <= _U64_MAX):
            raise ValueError(f"seq out of range: {self.seq}")
        for k, v in self.headers.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValueError("headers must map str to str")
        if not isinstance(self.payload, (bytes, bytearray)):
            raise ValueError("payload must be bytes")

    def _rehead(self, headers: dict) -> "Envelope":
        # every other field is already validated, so skip __post_init__
        for k, v in headers.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValueError("headers must map str to str")
        e = object.__new__(Envelope)
        e.__dict__.update(self.__dict__)
        object.__setattr__(e, "headers", headers)
        return e

    def with_headers(self, **extra: str) -> "Envelope":
        h = dict(self.headers)
        h.update(extra)
        return self._rehead(h)

    def without_headers(self, *names: str) -> "Envelope":
        return self._rehead({k: v for k, v in self.headers.items() if k not in names})


def _b64(b: bytes) -> str:
    return base64.b64encode(bytes(b)).decode("ascii")


def _unb64(s, what: str) -> bytes:
    if not isinstance(s, str):
        raise ValueError(f"{what} must be a base64 string")
    try:
        raw = s.encode("ascii")
        b = binascii.a2b_base64(raw)
    except (binascii.Error, UnicodeEncodeError):
        raise ValueError(f"{what} is not valid base64") from None
    # a2b_base64 skips junk characters; insist on the canonical encoding
    if binascii.b2a_base64(b, newline=False) != raw:
        raise ValueError(f"{what} is not valid base64")
    return b


def to_json_obj(e: Envelope, include_sig: bool = True) -> dict:
    obj = {
        "id": e.id,
        "topic": e.topic,
        "sender": e.sender,
        "ts": e.ts,
        "seq": e.seq,
        "headers": dict(e.headers),
        "payload": _b64(e.payload),
        "enc": None,
    }
    if e.enc is not None:
        obj["enc"] = {"key_id": e.enc.key_id, "cipher": e.enc.cipher, "nonce": _b64(e.enc.nonce)}
    if include_sig:
        obj["sig"] = None
        if e.sig is not None:
            obj["sig"] = {"signer": e.sig.signer, "signature": _b64(e.sig.signature)}
    return obj


def from_json_obj(obj) -> Envelope:
    if not isinstance(obj, dict):
        raise ValueError("envelope must be a JSON object")
    enc = obj.get("enc")
    sig = obj.get("sig")
    headers = obj.get("headers") or {}
    if not isinstance(headers, dict):
        raise ValueError("headers must be an object")
    seq = obj.get("seq")
    if seq is not None and not isinstance(seq, int):
        raise ValueError("seq must be an integer")
    return Envelope(
        id=obj["id"],
        topic=obj["topic"],
        sender=obj["sender"],
        ts=obj["ts"],
        seq=seq,
        headers=headers,
        payload=_unb64(obj.get("payload", ""), "payload"),
        enc=None if enc is None else Encryption(enc["key_id"], enc["cipher"], _unb64(enc["nonce"], "nonce")),
        sig=None if sig is None else Signature(sig["signer"], _unb64(sig["signature"], "signature")),
    )


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def canonical_bytes(e: Envelope) -> bytes:
    """Deterministic byte form of everything except the signature."""
    return _dumps(to_json_obj(e, include_sig=False))


_fast = json.JSONEncoder(separators=(",", ":"), ensure_ascii=False).encode


def serialize(e: Envelope) -> bytes:
    # field order is fixed by to_json_obj, so the bytes are stable without sorting
    return _fast(to_json_obj(e)).encode("utf-8")


def pack_frame(body: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    if len(body) > max_frame:
        raise FrameTooLarge(f"frame body {len(body)} bytes exceeds limit {max_frame}")
    return _LEN.pack(len(body)) + body


def encode_envelope(e: Envelope, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    return pack_frame(serialize(e), max_frame)


def parse_body(body: bytes) -> Envelope:
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("invalid UTF-8", exc.start) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, len(text[: exc.pos].encode("utf-8"))) from None
    try:
        return from_json_obj(obj)
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"invalid envelope: {exc}", 0) from None


def decode_envelope(frame: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> Envelope:
    if len(frame) < _LEN.size:
        raise FramingError(f"frame shorter than length prefix ({len(frame)} bytes)")
    (length,) = _LEN.unpack_from(frame)
    if length > max_frame:
        raise FrameTooLarge(f"declared length {length} exceeds limit {max_frame}")
    body = frame[_LEN.size:]
    if len(body) != length:
        raise FramingError(f"length prefix says {length} bytes, {len(body)} present")
    return parse_body(bytes(body))


class FrameReader:
    """Incremental splitter for a byte stream of concatenated frames."""

    def __init__(self, max_frame: int = DEFAULT_MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> Iterator[bytes]:
        self._buf += data
        while len(self._buf) >= _LEN.size:
            (length,) = _LEN.unpack_from(self._buf)
            if length > self.max_frame:
                raise FrameTooLarge(f"declared length {length} exceeds limit {self.max_frame}")
            end = _LEN.size + length
            if len(self._buf) < end:
                break
            body = bytes(self._buf[_LEN.size:end])
            del self._buf[:end]
            yield body

    @property
    def pending(self) -> int:
        return len(self._buf)
