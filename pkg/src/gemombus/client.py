"""Publisher/subscriber endpoint logic, independent of transport.

The client keeps at-least-once publishing (retransmit until PUBACK or a
deadline), fetches and unwraps topic keys from the KMF, encrypts payloads,
and hands received envelopes to the application in (term, seq) order per
topic group, suppressing duplicates.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto
from .broker import RoutingTable
from .kmf import RevocationNotice, SecurityToken, WrappedKey, key_epoch, kmf_request, sign_envelope, topic_pseudonym
from .topics import covers, is_literal, match
from .wire import KMF_KEYREQ, KMF_REVOCATION, Encryption, Envelope, new_id

log = logging.getLogger(__name__)


@dataclass
class PendingPub:
    topic: str
    payload: bytes
    first_sent: float
    last_sent: float = 0.0
    envelope: Optional[Envelope] = None
    broker: str = ""
    attempts: int = 0


@dataclass
class Held:
    env: Envelope
    since: float


@dataclass
class ClientSub:
    pattern: str
    token_id: str
    broker: str = ""
    sub_id: str = ""
    sent_at: float = 0.0


class Client:
    def __init__(
        self,
        principal: str,
        private_key,
        send: Callable[[str, Envelope], None],
        routing: Callable[[], RoutingTable],
        clock: Callable[[], float],
        kmf_endpoint: str = "kmf",
        kmf_public_key: Optional[bytes] = None,
        pseudonym_secret: Optional[bytes] = None,
        encrypt: bool = True,
        sign: bool = False,
        retry_interval: float = 2.0,
        deadline: float = 120.0,
        gap_timeout: float = 5.0,
        rng=None,
    ):
        self.principal = principal
        self.private_key = private_key
        self.send = send
        self.routing = routing
        self.clock = clock
        self.kmf_endpoint = kmf_endpoint
        self.kmf_public_key = kmf_public_key
        self.pseudonym_secret = pseudonym_secret
        self.encrypt = encrypt
        self.sign = sign
        self.retry_interval = retry_interval
        self.deadline = deadline
        self.gap_timeout = gap_timeout
        self.rng = rng
        self.tokens: dict[str, SecurityToken] = {}
        self.keys: dict[str, bytes] = {}
        self.current_key: dict[str, str] = {}
        self.key_epoch = 0
        self.key_requests: dict[str, str] = {}  # request id -> topic
        self.key_request_at: dict[str, float] = {}  # topic -> when last requested
        self.awaiting_key: dict[str, list] = defaultdict(list)  # topic -> publish ids
        self.held_for_key: dict[str, list] = defaultdict(list)  # topic -> (src, env)
        self.pending: dict[str, PendingPub] = {}
        self.subs: list[ClientSub] = []
        self.seen: set[str] = set()
        self.expected: dict[str, tuple] = {}
        self.reorder: dict[str, dict] = defaultdict(dict)
        self.authed: set[tuple] = set()
        self.routing_version = -1
        self._primary_cache: dict = {}
        self.alive = True
        self.stats = defaultdict(int)
        # application hooks
        self.on_message: Callable[[Envelope, bytes], None] = lambda env, payload: None
        self.on_confirm: Callable[[str, int], None] = lambda msg_id, seq: None
        self.on_giveup: Callable[[str, str], None] = lambda msg_id, reason: None
        self.on_notice: Callable[[RevocationNotice], None] = lambda n: None

    # topology helpers

    def wire_topic(self, topic: str) -> str:
        if self.pseudonym_secret is None or not is_literal(topic) or topic.startswith("_gemom/"):
            return topic
        return topic_pseudonym(topic, self.pseudonym_secret)

    def _primary_for(self, pattern: str) -> Optional[str]:
        table = self.routing()
        key = (id(table), pattern)
        hit = self._primary_cache.get(key)
        if hit is not None and hit[0] is table:
            return hit[1]
        primary = None
        for g in table.groups:
            if any(covers(p, pattern) or match(p, pattern) for p in g.patterns):
                primary = None if g.parked else g.primary
                break
        if len(self._primary_cache) > 4096:
            self._primary_cache.clear()
        self._primary_cache[key] = (table, primary)
        return primary

    def _authenticate(self, broker: str) -> None:
        for tok in self.tokens.values():
            if (broker, tok.token_id) in self.authed:
                continue
            self.authed.add((broker, tok.token_id))
            self._send(broker, "AUTH", headers={"token": tok.encode()})

    def _send(self, dest: str, verb: str, topic: str = "_gemom/ctl", headers=None, payload=b"") -> Envelope:
        e = Envelope(
            id=new_id(self.rng),
            topic=topic,
            sender=self.principal,
            ts=int(self.clock() * 1000),
            headers={"verb": verb, **(headers or {})},
            payload=payload,
        )
        self.send(dest, e)
        return e

    def add_token(self, tok: SecurityToken) -> None:
        self.tokens[tok.token_id] = tok

    def _token_for(self, right: str, topic: str) -> Optional[SecurityToken]:
        for tok in self.tokens.values():
            if right in tok.rights and (match(tok.pattern, topic) or covers(tok.pattern, topic)):
                return tok
        return None

    # keys

    def request_key(self, topic: str, retry: bool = False) -> None:
        if topic in self.key_request_at and not retry:
            return
        for rid in [r for r, t in self.key_requests.items() if t == topic]:
            del self.key_requests[rid]
        req = kmf_request(
            KMF_KEYREQ, self.principal, {"topic": topic}, self.kmf_public_key, self.private_key,
            int(self.clock() * 1000), self.rng,
        )
        self.key_requests[req.id] = topic
        self.key_request_at[topic] = self.clock()
        self.send(self.kmf_endpoint, req)

    def _on_kmf_reply(self, e: Envelope) -> None:
        topic = self.key_requests.pop(e.headers.get("ref", ""), None)
        if topic is None:
            return
        self.key_request_at.pop(topic, None)
        status = e.headers.get("status")
        body = json.loads(e.payload or b"{}")
        if status == "stale-key":
            self.request_key(topic, retry=True)
            return
        if status != "ok":
            self.stats["key.denied"] += 1
            for mid in self.awaiting_key.pop(topic, []):
                self._give_up(mid, "key-denied")
            return
        wk = WrappedKey.from_json(body)
        self.keys[wk.key_id] = crypto.open_sealed(self.private_key, wk.wrapped)
        if key_epoch(wk.key_id) >= self.key_epoch:
            self.current_key[topic] = wk.key_id
        for mid in self.awaiting_key.pop(topic, []):
            self._transmit(mid)
        for src, held in self.held_for_key.pop(topic, []):
            self._on_msg(src, held)

    # publishing

    def publish(self, topic: str, payload: bytes, msg_id: Optional[str] = None) -> str:
        mid = msg_id or new_id(self.rng)
        self.pending[mid] = PendingPub(topic, payload, self.clock())
        self._transmit(mid)
        return mid

    def _build(self, mid: str, p: PendingPub) -> Optional[Envelope]:
        tok = self._token_for("publish", p.topic)
        if tok is None:
            self._give_up(mid, "no-token")
            return None
        enc = None
        body = p.payload
        if self.encrypt:
            kid = self.current_key.get(p.topic)
            if kid is None:
                self.awaiting_key[p.topic].append(mid)
                self.request_key(p.topic)
                return None
            nonce, body = crypto.encrypt(self.keys[kid], p.payload, mid.encode())
            enc = Encryption(kid, crypto.CIPHER_NAME, nonce)
        e = Envelope(
            id=mid,
            topic=self.wire_topic(p.topic),
            sender=self.principal,
            ts=int(self.clock() * 1000),
            headers={"verb": "PUB", "tok": tok.token_id},
            payload=body,
            enc=enc,
        )
        if self.sign:
            e = sign_envelope(e, self.private_key)
        return e

    def _transmit(self, mid: str) -> None:
        p = self.pending.get(mid)
        if p is None:
            return
        stale = p.envelope is not None and p.envelope.enc is not None and key_epoch(p.envelope.enc.key_id) < self.key_epoch
        if p.envelope is None or stale:
            p.envelope = self._build(mid, p)
            if p.envelope is None:
                return
        broker = self._primary_for(p.topic)
        p.last_sent = self.clock()
        p.attempts += 1
        if broker is None:
            return
        self._authenticate(broker)
        p.broker = broker
        self.stats["pub.sent"] += 1
        self.send(broker, p.envelope)

    def _give_up(self, mid: str, reason: str) -> None:
        if self.pending.pop(mid, None) is not None:
            self.stats[f"giveup.{reason}"] += 1
            self.on_giveup(mid, reason)

    # subscribing

    def subscribe(self, pattern: str) -> ClientSub:
        tok = self._token_for("subscribe", pattern)
        if tok is None and pattern != KMF_REVOCATION:
            raise PermissionError(f"no token grants subscribe on {pattern}")
        tok = tok or next(iter(self.tokens.values()))
        s = ClientSub(pattern, tok.token_id)
        self.subs.append(s)
        self._send_sub(s)
        return s

    def _send_sub(self, s: ClientSub) -> None:
        broker = self._primary_for(s.pattern) if s.pattern != KMF_REVOCATION else self._any_broker()
        if broker is None:
            return
        self._authenticate(broker)
        s.broker = broker
        s.sub_id = ""
        s.sent_at = self.clock()
        start = {g: [t, n] for g, (t, n) in self.expected.items()}
        self._send(broker, "SUB", headers={"pattern": self.wire_topic(s.pattern), "tok": s.token_id, "from": json.dumps(start, sort_keys=True)})

    def _any_broker(self) -> Optional[str]:
        for g in self.routing().groups:
            if g.primary and not g.parked:
                return g.primary
        return None

    # incoming

    def handle(self, src: str, e: Envelope) -> None:
        if not self.alive:
            return
        verb = e.headers.get("verb", "")
        if verb == "PUBACK":
            mid = e.headers.get("ref", "")
            if self.pending.pop(mid, None) is not None:
                self.on_confirm(mid, int(e.headers.get("seq", "0")))
        elif verb == "NACK":
            self._on_nack(e)
        elif verb == "MSG":
            self._on_msg(src, e)
        elif verb == "KMF-REPLY":
            self._on_kmf_reply(e)
        elif verb == "SUBOK":
            for s in self.subs:
                if s.broker == src and self.wire_topic(s.pattern) == e.headers.get("pattern"):
                    s.sub_id = e.headers.get("sub", "")
        elif verb == "AUTHOK":
            pass
        else:
            self.stats[f"unhandled.{verb}"] += 1

    def _on_nack(self, e: Envelope) -> None:
        mid = e.headers.get("ref", "")
        reason = e.headers.get("reason", "")
        self.stats[f"nack.{reason}"] += 1
        p = self.pending.get(mid)
        if p is None:
            return
        if reason == "stale-key":
            self.current_key.pop(p.topic, None)
            p.envelope = None
            self._transmit(mid)
        elif reason in ("not-primary", "unavailable"):
            pass  # retried once routing changes
        elif reason == "auth" and e.headers.get("detail") == "no authenticated token":
            # our AUTH never arrived: authenticate again and let the retry timer resend
            self.authed = {(b, t) for b, t in self.authed if b != e.sender}
        else:
            self._give_up(mid, reason)

    def _plain_topic(self, wire: str) -> str:
        if self.pseudonym_secret is None or not wire.startswith("~"):
            return wire
        for s in self.subs:
            if is_literal(s.pattern) and topic_pseudonym(s.pattern, self.pseudonym_secret) == wire:
                return s.pattern
        return wire

    def _on_msg(self, src: str, e: Envelope) -> None:
        if e.topic == KMF_REVOCATION:
            self._on_revocation(e)
            return
        topic = self._plain_topic(e.topic)
        payload = e.payload
        if e.enc is not None:
            material = self.keys.get(e.enc.key_id)
            if material is None:
                self.held_for_key[topic].append((src, e))
                self.request_key(topic)
                return
            try:
                payload = crypto.decrypt(material, e.enc.nonce, e.payload, e.id.encode())
            except crypto.DecryptError:
                self.stats["decrypt.failed"] += 1
                self._send(src, "ACK", headers={"ref": e.id, "sub": e.headers.get("sub", "")})
                return
        self._send(src, "ACK", headers={"ref": e.id, "sub": e.headers.get("sub", "")})
        if e.id in self.seen:
            self.stats["dup"] += 1
            return
        self.seen.add(e.id)
        grp = e.headers.get("grp")
        if grp is None or e.seq is None:
            self.on_message(e, payload)
            return
        self._order(grp, (int(e.headers.get("term", "0")), e.seq), e, payload)

    def _order(self, grp: str, pos: tuple, e: Envelope, payload: bytes) -> None:
        exp = self.expected.get(grp)
        if exp is None or pos[0] > exp[0] and not self.reorder[grp]:
            self._release(grp, pos, e, payload)
        elif pos == exp:
            self._release(grp, pos, e, payload)
        elif pos > exp:
            self.reorder[grp][pos] = (e, payload, self.clock())
            if pos[0] > exp[0]:
                self._skip_gap(grp)
            return
        else:
            self.stats["order.late"] += 1
            self.on_message(e, payload)
            return
        self._drain(grp)

    def _release(self, grp: str, pos: tuple, e: Envelope, payload: bytes) -> None:
        self.expected[grp] = (pos[0], pos[1] + 1)
        self.on_message(e, payload)

    def _drain(self, grp: str) -> None:
        held = self.reorder[grp]
        while held:
            exp = self.expected[grp]
            if exp in held:
                e, payload, _ = held.pop(exp)
                self._release(grp, exp, e, payload)
            else:
                break

    def _skip_gap(self, grp: str) -> None:
        held = self.reorder[grp]
        if not held:
            return
        first = min(held)
        self.stats["order.gap"] += 1
        e, payload, _ = held.pop(first)
        self._release(grp, first, e, payload)
        self._drain(grp)

    def _on_revocation(self, e: Envelope) -> None:
        try:
            notice = RevocationNotice.from_json(json.loads(e.payload))
        except (ValueError, KeyError):
            return
        if e.id in self.seen:
            return
        self.seen.add(e.id)
        if notice.revoked == "ALL":
            self.key_epoch = max(self.key_epoch, notice.epoch)
            self.current_key.clear()
        self.on_notice(notice)

    # timers

    def tick(self) -> None:
        if not self.alive:
            return
        now = self.clock()
        table = self.routing()
        if table.version != self.routing_version:
            first = self.routing_version < 0
            self.routing_version = table.version
            if not first:
                self._reattach()
        for mid, p in list(self.pending.items()):
            if now - p.first_sent > self.deadline:
                self._give_up(mid, "deadline")
            elif p.envelope is not None and now - p.last_sent >= self.retry_interval:
                self.stats["pub.retry"] += 1
                self._transmit(mid)
        for topic, at in sorted(self.key_request_at.items()):
            if now - at >= self.retry_interval:
                self.request_key(topic, retry=True)
        for s in self.subs:
            if not s.sub_id and now - s.sent_at >= self.retry_interval:
                self._send_sub(s)
        for grp, held in self.reorder.items():
            if held and now - min(h[2] for h in held.values()) > self.gap_timeout:
                self._skip_gap(grp)

    def _reattach(self) -> None:
        """Routing changed: re-subscribe where the primary moved, resend unconfirmed."""
        for s in self.subs:
            target = self._primary_for(s.pattern) if s.pattern != KMF_REVOCATION else self._any_broker()
            if target != s.broker:
                self._send_sub(s)
        for mid, p in list(self.pending.items()):
            if p.envelope is not None and self._primary_for(p.topic) != p.broker:
                self._transmit(mid)
