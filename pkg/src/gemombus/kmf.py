"""Key Management Framework.

Issues per-topic AES keys, wraps them to authorized principals, signs rights
tokens, and broadcasts revocations.  The KMF root keypair doubles as the
certification authority for principal certificates.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterable, Optional

from . import crypto
from .topics import match, validate_pattern, validate_topic
from .wire import (
    KMF_KEYREQ,
    KMF_PUBKEYS,
    KMF_REGISTER,
    KMF_REVOCATION,
    Envelope,
    Signature,
    canonical_bytes,
    new_id,
)

KEY_SIZES = (128, 192, 256)
RIGHTS = frozenset({"publish", "subscribe"})
MAX_STRENGTH = 5


class KmfError(Exception):
    pass


class UnknownPrincipal(KmfError):
    pass


class DuplicateTopic(KmfError):
    pass


class KeyDenied(KmfError):
    pass


class StaleKey(KmfError):
    pass


@dataclass(frozen=True)
class PrincipalRecord:
    principal: str
    public_key: bytes
    groups: tuple[str, ...]
    certificate: bytes

    def attestation(self) -> bytes:
        return _cert_body(self.principal, self.public_key, self.groups)


def _cert_body(principal: str, public_key: bytes, groups: Iterable[str]) -> bytes:
    return json.dumps(
        {"principal": principal, "public_key": base64.b64encode(public_key).decode(), "groups": sorted(groups)},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()


@dataclass
class TopicKey:
    key_id: str
    topic: str
    bits: int
    material: bytes = field(repr=False)
    created: float
    status: str = "active"


@dataclass(frozen=True)
class WrappedKey:
    key_id: str
    topic: str
    bits: int
    wrapped: bytes

    def to_json(self) -> dict:
        return {
            "key_id": self.key_id,
            "topic": self.topic,
            "bits": self.bits,
            "wrapped": base64.b64encode(self.wrapped).decode(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WrappedKey":
        return cls(obj["key_id"], obj["topic"], int(obj["bits"]), base64.b64decode(obj["wrapped"]))


def unwrap_key(wk: WrappedKey, private_key) -> bytes:
    return crypto.open_sealed(private_key, wk.wrapped)


@dataclass(frozen=True)
class SecurityToken:
    token_id: str
    subject: str
    pattern: str
    rights: tuple[str, ...]
    auth_strength: int
    not_before: int
    not_after: int
    digest: bytes = b""
    signature: bytes = b""

    def body(self) -> bytes:
        return json.dumps(
            {
                "token_id": self.token_id,
                "subject": self.subject,
                "pattern": self.pattern,
                "rights": list(self.rights),
                "auth_strength": self.auth_strength,
                "not_before": self.not_before,
                "not_after": self.not_after,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode()

    def grants(self, right: str, topic: str) -> bool:
        return right in self.rights and match(self.pattern, topic)

    def encode(self) -> str:
        """Base64 of the canonical JSON form, suitable for a header value."""
        obj = json.loads(self.body())
        obj["digest"] = base64.b64encode(self.digest).decode()
        obj["signature"] = base64.b64encode(self.signature).decode()
        raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
        return base64.b64encode(raw).decode()

    @classmethod
    def decode(cls, text: str) -> "SecurityToken":
        obj = json.loads(base64.b64decode(text))
        return cls(
            token_id=obj["token_id"],
            subject=obj["subject"],
            pattern=obj["pattern"],
            rights=tuple(obj["rights"]),
            auth_strength=int(obj["auth_strength"]),
            not_before=int(obj["not_before"]),
            not_after=int(obj["not_after"]),
            digest=base64.b64decode(obj["digest"]),
            signature=base64.b64decode(obj["signature"]),
        )


TOKEN_FIELDS = tuple(f.name for f in fields(SecurityToken))


@dataclass(frozen=True)
class Verdict:
    valid: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.valid


VALID = Verdict(True)


class TokenVerifier:
    """Stateless-ish token check needing only the KMF public key.

    Brokers hold one of these and feed it revocation notices.
    """

    def __init__(self, kmf_public_key: bytes):
        self.kmf_public_key = crypto.load_public(kmf_public_key)
        self.revoked: set[str] = set()

    def verify(self, t: SecurityToken, now_ms: int) -> Verdict:
        if crypto.sha256(t.body()) != t.digest:
            return Verdict(False, "tampered")
        if not crypto.verify(self.kmf_public_key, t.signature, t.digest):
            return Verdict(False, "bad-signature")
        # half-open window: a zero-ttl token is never valid
        if not (t.not_before <= now_ms < t.not_after):
            return Verdict(False, "expired")
        if t.token_id in self.revoked:
            return Verdict(False, "revoked")
        return VALID

    def apply_notice(self, notice: "RevocationNotice") -> None:
        if notice.revoked != "ALL":
            self.revoked.update(r for r in notice.revoked if r.startswith("t"))


@dataclass(frozen=True)
class RevocationNotice:
    revoked: object  # tuple of ids, or the string "ALL"
    reason: str
    at: int
    new_bits: int
    epoch: int = 0  # key epoch in force after this notice

    def to_json(self) -> dict:
        return {
            "revoked": self.revoked if self.revoked == "ALL" else list(self.revoked),
            "reason": self.reason,
            "at": self.at,
            "new_bits": self.new_bits,
            "epoch": self.epoch,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RevocationNotice":
        rev = obj["revoked"]
        return cls(
            rev if rev == "ALL" else tuple(rev),
            obj["reason"],
            int(obj["at"]),
            int(obj["new_bits"]),
            int(obj.get("epoch", 0)),
        )


def key_epoch(key_id: str) -> int:
    """Key ids look like ``k<epoch>.<hex>``; a revoke-all bumps the epoch."""
    try:
        return int(key_id[1:].split(".", 1)[0])
    except ValueError:
        return -1


class TopicDirectory:
    """Which KMF manages which secure topic; shared between KMF instances."""

    def __init__(self):
        self.owner_kmf: dict[str, str] = {}


def topic_pseudonym(topic: str, group_secret: bytes) -> str:
    """Keyed-hash alias hiding a topic name from intermediaries."""
    return "~" + crypto.b32(crypto.keyed_hash(group_secret, topic.encode("utf-8"))[:16])


def sign_envelope(e: Envelope, private_key, signer: Optional[str] = None) -> Envelope:
    sig = crypto.sign(private_key, canonical_bytes(e))
    return replace(e, sig=Signature(signer or e.sender, sig))


def verify_envelope(e: Envelope, public_key) -> bool:
    if e.sig is None:
        return False
    return crypto.verify(public_key, e.sig.signature, canonical_bytes(e))


class Kmf:
    """The key service.  One writer: call its methods from a single task."""

    def __init__(
        self,
        kmf_id: str = "kmf",
        clock: Callable[[], float] = None,
        rng=None,
        default_bits: int = 128,
        eager_regeneration: bool = False,
        directory: Optional[TopicDirectory] = None,
        audit: Optional[Callable[..., None]] = None,
        root_key=None,
    ):
        if default_bits not in KEY_SIZES:
            raise ValueError(f"key size must be one of {KEY_SIZES}")
        self.kmf_id = kmf_id
        self.clock = clock or _wall_ms
        self.rng = rng
        self.root = root_key or crypto.generate_keypair()
        self.public_key = crypto.public_bytes(self.root)
        self.verifier = TokenVerifier(self.public_key)
        self.principals: dict[str, PrincipalRecord] = {}
        self.keys: dict[str, TopicKey] = {}
        self.active: dict[str, str] = {}
        self.secure_topics: dict[str, str] = {}  # topic -> owner
        self.acl: dict[str, set[str]] = {}  # topic -> principals / "group:<g>"
        self.threat_bits = default_bits
        self.eager_regeneration = eager_regeneration
        self.directory = directory or TopicDirectory()
        self.audit = audit or (lambda *a, **k: None)
        self.denials = 0
        self.epoch = 0
        self.notices: list[RevocationNotice] = []
        self.listeners: list[Callable[[RevocationNotice], None]] = []
        self._counter = 0

    def _id(self, prefix: str) -> str:
        self._counter += 1
        if self.rng is None:
            return f"{prefix}{os.urandom(8).hex()}"
        return f"{prefix}{self.rng.getrandbits(64):016x}"

    # principals

    def register_principal(self, name: str, public_key: bytes, groups: Iterable[str] = ()) -> PrincipalRecord:
        groups = tuple(sorted(set(groups)))
        cert = crypto.sign(self.root, _cert_body(name, public_key, groups))
        rec = PrincipalRecord(name, bytes(public_key), groups, cert)
        self.principals[name] = rec
        self.audit("auth", self.kmf_id, event="register-principal", principal=name)
        return rec

    def verify_certificate(self, rec: PrincipalRecord) -> bool:
        return crypto.verify(self.public_key, rec.certificate, rec.attestation())

    def _principal(self, name: str) -> PrincipalRecord:
        try:
            return self.principals[name]
        except KeyError:
            raise UnknownPrincipal(name) from None

    def pubkey_announcements(self) -> list[Envelope]:
        """Certificates for every principal, on the public-key topic."""
        out = []
        for rec in sorted(self.principals.values(), key=lambda r: r.principal):
            body = json.loads(rec.attestation())
            body["certificate"] = base64.b64encode(rec.certificate).decode()
            out.append(
                Envelope(
                    id=new_id(self.rng),
                    topic=KMF_PUBKEYS,
                    sender=self.kmf_id,
                    ts=int(self.clock()),
                    payload=json.dumps(body, sort_keys=True).encode(),
                )
            )
        return out

    # topics and keys

    def register_secure_topic(self, topic: str, owner: str, requested_bits: int = 128) -> str:
        validate_topic(topic)
        self._principal(owner)
        if requested_bits not in KEY_SIZES:
            raise ValueError(f"key size must be one of {KEY_SIZES}")
        managed_by = self.directory.owner_kmf.get(topic)
        if managed_by is not None and managed_by != self.kmf_id:
            raise DuplicateTopic(f"{topic} is managed by KMF {managed_by}")
        if topic in self.secure_topics:
            raise DuplicateTopic(topic)
        self.directory.owner_kmf[topic] = self.kmf_id
        self.secure_topics[topic] = owner
        self.acl.setdefault(topic, set()).add(owner)
        key = self._new_key(topic, max(requested_bits, self.threat_bits))
        return key.key_id

    def grant(self, topic: str, *members: str) -> None:
        """Put principals (or ``group:<name>``) on a topic's authorization list."""
        if topic not in self.secure_topics:
            raise KmfError(f"{topic} is not a secure topic")
        self.acl[topic].update(members)

    def is_authorized(self, topic: str, principal: str) -> bool:
        acl = self.acl.get(topic, ())
        if principal in acl:
            return True
        rec = self.principals.get(principal)
        return rec is not None and any(f"group:{g}" in acl for g in rec.groups)

    def _new_key(self, topic: str, bits: int) -> TopicKey:
        key = TopicKey(self._id(f"k{self.epoch}."), topic, bits, os.urandom(bits // 8), self.clock())
        self.keys[key.key_id] = key
        self.active[topic] = key.key_id
        self.audit("key", self.kmf_id, event="generate", topic=topic, key_id=key.key_id, bits=bits)
        return key

    def active_key(self, topic: str) -> Optional[TopicKey]:
        kid = self.active.get(topic)
        return self.keys[kid] if kid else None

    def key_status(self, key_id: str) -> Optional[str]:
        k = self.keys.get(key_id)
        return k.status if k else None

    def request_topic_key(self, topic: str, requester: str, key_id: Optional[str] = None) -> WrappedKey:
        rec = self._principal(requester)
        if topic not in self.secure_topics or not self.is_authorized(topic, requester):
            self.denials += 1
            self.audit("key", requester, event="key-denied", topic=topic)
            raise KeyDenied(f"{requester} is not authorized for {topic}")
        if key_id is not None and self.key_status(key_id) == "revoked":
            raise StaleKey(f"key {key_id} was revoked; request the current key")
        key = self.active_key(topic)
        if key is None:
            key = self._new_key(topic, self.threat_bits)
        wrapped = crypto.seal_to(rec.public_key, key.material)
        return WrappedKey(key.key_id, topic, key.bits, wrapped)

    def revoke_all(self, new_bits: int, reason: str = "threat") -> RevocationNotice:
        if new_bits not in KEY_SIZES:
            raise ValueError(f"key size must be one of {KEY_SIZES}")
        old_bits = self.threat_bits
        for key in self.keys.values():
            key.status = "revoked"
        self.active.clear()
        self.threat_bits = new_bits
        self.epoch += 1
        notice = RevocationNotice("ALL", reason, int(self.clock()), new_bits, self.epoch)
        self._broadcast(notice)
        self.audit("key", self.kmf_id, event="revoke-all", reason=reason, old_bits=old_bits, new_bits=new_bits)
        if self.eager_regeneration:
            for topic in sorted(self.secure_topics):
                self._new_key(topic, new_bits)
        return notice

    def revoke_token(self, token_id: str, reason: str = "manual") -> RevocationNotice:
        self.verifier.revoked.add(token_id)
        notice = RevocationNotice((token_id,), reason, int(self.clock()), self.threat_bits, self.epoch)
        self._broadcast(notice)
        self.audit("auth", self.kmf_id, event="revoke-token", token_id=token_id, reason=reason)
        return notice

    def _broadcast(self, notice: RevocationNotice) -> None:
        self.notices.append(notice)
        for fn in list(self.listeners):
            fn(notice)

    def revocation_envelope(self, notice: RevocationNotice) -> Envelope:
        return Envelope(
            id=new_id(self.rng),
            topic=KMF_REVOCATION,
            sender=self.kmf_id,
            ts=int(self.clock()),
            payload=json.dumps(notice.to_json(), sort_keys=True).encode(),
        )

    # tokens

    def issue_token(
        self, subject: str, pattern: str, rights: Iterable[str], auth_strength: int, ttl_ms: int
    ) -> SecurityToken:
        self._principal(subject)
        validate_pattern(pattern)
        rights = tuple(sorted(set(rights)))
        if not rights or not set(rights) <= RIGHTS:
            raise ValueError(f"rights must be a non-empty subset of {sorted(RIGHTS)}")
        if not 0 <= auth_strength <= MAX_STRENGTH:
            raise ValueError("auth_strength must be in 0..5")
        if ttl_ms < 0:
            raise ValueError("ttl must be non-negative")
        now = int(self.clock())
        t = SecurityToken(self._id("t"), subject, pattern, rights, auth_strength, now, now + ttl_ms)
        digest = crypto.sha256(t.body())
        return replace(t, digest=digest, signature=crypto.sign(self.root, digest))

    def verify_token(self, t: SecurityToken, now_ms: Optional[int] = None) -> Verdict:
        return self.verifier.verify(t, int(self.clock()) if now_ms is None else now_ms)

    # wire interface

    def handle(self, e: Envelope) -> Envelope:
        """Serve one request envelope on a KMF topic and build the reply.

        Requests carry a payload sealed to the KMF public key and a signature
        by the requesting principal.
        """
        status, body = "ok", {}
        try:
            rec = self._principal(e.sender)
            if not verify_envelope(e, rec.public_key):
                raise KeyDenied("request signature does not verify")
            req = json.loads(crypto.open_sealed(self.root, e.payload))
            if e.topic == KMF_REGISTER:
                body = {"key_id": self.register_secure_topic(req["topic"], e.sender, int(req.get("bits", 128)))}
            elif e.topic == KMF_KEYREQ:
                body = self.request_topic_key(req["topic"], e.sender, req.get("key_id")).to_json()
            else:
                raise KmfError(f"not a KMF request topic: {e.topic}")
        except StaleKey as exc:
            status, body = "stale-key", {"error": str(exc)}
        except (KmfError, crypto.DecryptError, ValueError, KeyError) as exc:
            status, body = "denied", {"error": str(exc) or type(exc).__name__}
        return Envelope(
            id=new_id(self.rng),
            topic=e.topic,
            sender=self.kmf_id,
            ts=int(self.clock()),
            headers={"verb": "KMF-REPLY", "ref": e.id, "status": status},
            payload=json.dumps(body, sort_keys=True).encode(),
        )


def kmf_request(topic: str, sender: str, body: dict, kmf_public_key: bytes, private_key, ts: int, rng=None) -> Envelope:
    """Client side: seal ``body`` to the KMF and sign the request."""
    e = Envelope(
        id=new_id(rng),
        topic=topic,
        sender=sender,
        ts=ts,
        headers={"verb": "KMF"},
        payload=crypto.seal_to(kmf_public_key, json.dumps(body, sort_keys=True).encode()),
    )
    return sign_envelope(e, private_key)


def _wall_ms() -> float:
    import time

    return time.time() * 1000.0
