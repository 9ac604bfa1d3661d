"""The operational node: authenticated publish/subscribe routing.

A ``Broker`` is transport-agnostic.  Whatever drives it (the simulator or
the TCP server) feeds it envelopes through :meth:`Broker.handle` and hands
it a ``send(endpoint, envelope)`` callable for output.  Client verbs travel
in the ``verb`` header.

Each topic group has one primary broker that assigns sequence numbers,
keeps a bounded replay buffer and streams sequenced envelopes to the
group's mirrors.
"""

from __future__ import annotations

import heapq
import json
import logging
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional

from .authz import Authorizer, CompositeKey
from .kmf import RevocationNotice, SecurityToken, TokenVerifier, key_epoch, topic_pseudonym
from .topics import TopicError, covers, is_literal, match, validate_pattern, validate_topic
from .wire import CLIENT_WRITABLE, KMF_REVOCATION, SYSTEM_PREFIX, Envelope, new_id

log = logging.getLogger(__name__)

DEFAULT_GROUP = "default"


@dataclass(frozen=True)
class GroupInfo:
    group_id: str
    patterns: tuple
    primary: Optional[str]
    mirrors: tuple = ()
    parked: bool = False


@dataclass(frozen=True)
class RoutingTable:
    """Versioned snapshot of group ownership; replaced, never mutated."""

    version: int = 0
    groups: tuple = ()

    def group_for(self, topic: str) -> Optional[GroupInfo]:
        for g in self.groups:
            if any(match(p, topic) for p in g.patterns):
                return g
        return None

    def get(self, group_id: str) -> Optional[GroupInfo]:
        for g in self.groups:
            if g.group_id == group_id:
                return g
        return None

    def replace_group(self, info: GroupInfo) -> "RoutingTable":
        groups = tuple(info if g.group_id == info.group_id else g for g in self.groups)
        if info.group_id not in {g.group_id for g in self.groups}:
            groups += (info,)
        return RoutingTable(self.version + 1, groups)


@dataclass
class Subscription:
    sub_id: str
    subscriber: str
    endpoint: str
    pattern: str  # resolved (plaintext) pattern
    token_id: str
    created: float
    wire_pattern: str = ""


@dataclass
class DeliveryRecord:
    envelope_id: str
    subscriber: str
    sub_id: str
    state: str = "pending"
    attempts: int = 1
    due: float = 0.0


@dataclass
class GroupState:
    group_id: str
    role: str  # primary | mirror
    term: int = 0
    next_seq: int = 1
    buffer: deque = field(default_factory=deque)
    ids: dict = field(default_factory=dict)  # envelope id -> seq

    @property
    def last_seq(self) -> int:
        return self.next_seq - 1


@dataclass
class Session:
    endpoint: str
    principal: Optional[str] = None
    tokens: dict = field(default_factory=dict)


class Broker:
    def __init__(
        self,
        node_id: str,
        verifier: TokenVerifier,
        send: Callable[[str, Envelope], None],
        routing: Callable[[], RoutingTable],
        clock: Callable[[], float],
        authorizer: Optional[Authorizer] = None,
        floor: Callable[[], int] = lambda: 0,
        pseudonym_secret: Optional[bytes] = None,
        kmf_endpoint: Optional[str] = None,
        kmf_id: str = "kmf",
        peers: Callable[[], Iterable[str]] = lambda: (),
        max_redelivery: int = 3,
        ack_timeout: float = 1.0,
        replay_capacity: int = 10_000,
        sync_mirroring: bool = False,
        audit: Optional[Callable[..., None]] = None,
        evidence: Optional[Callable[[str, str], None]] = None,
        rng=None,
    ):
        self.node_id = node_id
        self.verifier = verifier
        self.send = send
        self.routing = routing
        self.clock = clock
        self.authorizer = authorizer
        self.floor = floor
        self.pseudonym_secret = pseudonym_secret
        self.pseudonyms: dict[str, str] = {}
        self.kmf_endpoint = kmf_endpoint
        self.kmf_id = kmf_id
        self.peers = peers
        self.max_redelivery = max_redelivery
        self.ack_timeout = ack_timeout
        self.replay_capacity = replay_capacity
        self.sync_mirroring = sync_mirroring
        self.audit = audit or (lambda *a, **k: None)
        self.evidence = evidence or (lambda entity, outcome: None)
        self.rng = rng
        self.sessions: dict[str, Session] = {}
        self.subscriptions: dict[str, Subscription] = {}
        self.records: dict[tuple, DeliveryRecord] = {}
        self._due: list = []
        self.groups: dict[str, GroupState] = {}
        self.key_epoch = 0
        self.seen_control: set[str] = set()
        self.sync_waiting: dict[str, tuple] = {}  # envelope id -> (endpoint, seq, outstanding mirrors)
        self.counters: Counter = Counter()
        self.alive = True

    # group roles

    def ensure_group(self, group_id: str, role: str) -> GroupState:
        g = self.groups.get(group_id)
        if g is None:
            g = self.groups[group_id] = GroupState(group_id, role, buffer=deque())
        g.role = role
        return g

    def promote(self, group_id: str, term: int) -> GroupState:
        """Become the group's sequencer, resuming after the last buffered seq.

        ``term`` must exceed every earlier sequencer's term; subscribers order
        envelopes by (term, seq).
        """
        g = self.ensure_group(group_id, "primary")
        g.term = max(g.term + 1, term)
        self.audit("overlay", self.node_id, event="promoted", group=group_id, next_seq=g.next_seq)
        return g

    def last_seq(self, group_id: str) -> int:
        g = self.groups.get(group_id)
        return g.last_seq if g else 0

    # pseudonyms

    def learn_topics(self, topics: Iterable[str]) -> None:
        if self.pseudonym_secret is None:
            return
        for t in topics:
            self.pseudonyms[topic_pseudonym(t, self.pseudonym_secret)] = t

    def resolve(self, wire_topic: str) -> str:
        return self.pseudonyms.get(wire_topic, wire_topic)

    # entry point

    def handle(self, src: str, e: Envelope) -> None:
        if not self.alive:
            return
        verb = e.headers.get("verb", "")
        fn = self._verbs.get(verb)
        if fn is None:
            self._nack(src, e, "protocol", f"unknown verb {verb!r}")
            return
        fn(self, src, e)

    def _reply(self, dest: str, verb: str, ref: str, **headers: str) -> None:
        self.send(
            dest,
            Envelope(
                id=new_id(self.rng),
                topic=SYSTEM_PREFIX + "reply",
                sender=self.node_id,
                ts=int(self.clock() * 1000),
                headers={"verb": verb, "ref": ref, **headers},
            ),
        )

    def _nack(self, dest: str, e: Envelope, reason: str, detail: str = "", **headers: str) -> None:
        self.counters[f"reject.{reason}"] += 1
        self._reply(dest, "NACK", e.id, reason=reason, detail=detail, **headers)

    def _session(self, src: str) -> Session:
        s = self.sessions.get(src)
        if s is None:
            s = self.sessions[src] = Session(src)
        return s

    def _token(self, src: str, e: Envelope) -> tuple[Optional[SecurityToken], str]:
        """Session token named by the ``tok`` header, re-checked for window and revocation."""
        tok = self._session(src).tokens.get(e.headers.get("tok", ""))
        if tok is None:
            return None, "no authenticated token"
        now_ms = int(self.clock() * 1000)
        if not tok.not_before <= now_ms < tok.not_after:
            return None, "expired"
        if tok.token_id in self.verifier.revoked:
            return None, "revoked"
        return tok, ""

    # verbs

    def _on_auth(self, src: str, e: Envelope) -> None:
        try:
            tok = SecurityToken.decode(e.headers["token"])
        except (KeyError, ValueError, TypeError):
            self.evidence(e.sender, "failure")
            self.audit("auth", e.sender, event="auth-failed", reason="malformed-token")
            self._nack(src, e, "auth", "malformed token")
            return
        verdict = self.verifier.verify(tok, int(self.clock() * 1000))
        if not verdict.valid or tok.subject != e.sender:
            reason = verdict.reason or "subject-mismatch"
            self.evidence(e.sender, "failure")
            self.audit("auth", e.sender, event="auth-failed", reason=reason)
            self._nack(src, e, "auth", reason)
            return
        sess = self._session(src)
        sess.principal = tok.subject
        sess.tokens[tok.token_id] = tok
        self._reply(src, "AUTHOK", e.id, tok=tok.token_id)

    def _on_pub(self, src: str, e: Envelope) -> None:
        self.counters["pub.in"] += 1
        tok, why = self._token(src, e)
        if tok is None:
            self.evidence(e.sender, "failure")
            self.audit("auth", e.sender, event="publish-rejected", reason=why)
            self._nack(src, e, "auth", why)
            return
        topic = self.resolve(e.topic)
        if topic.startswith(SYSTEM_PREFIX):
            if topic == KMF_REVOCATION and tok.subject == self.kmf_id:
                self._on_control(src, e)
                self._reply(src, "PUBACK", e.id, seq="0")
                return
            if topic in CLIENT_WRITABLE and self.kmf_endpoint:
                self.send(self.kmf_endpoint, e)
                return
            self._nack(src, e, "authz", "system topic")
            return
        try:
            validate_topic(topic)
        except TopicError as exc:
            self._nack(src, e, "protocol", str(exc))
            return
        if not tok.grants("publish", topic):
            self.audit("authz", tok.subject, event="deny", op="publish", topic=topic, reason="token-scope")
            self._nack(src, e, "authz", "token does not grant publish")
            return
        floor = self.floor()
        if tok.auth_strength < floor:
            self.audit("authz", tok.subject, event="deny", op="publish", topic=topic, reason="strength-floor")
            self._nack(src, e, "strength", f"floor {floor} exceeds strength {tok.auth_strength}")
            return
        if self.authorizer is not None:
            d = self.authorizer.evaluate(CompositeKey(tok.subject, tok.auth_strength, time=self.clock()), "publish", topic)
            if not d.allowed:
                self._nack(src, e, "authz", d.reason)
                return
        if e.enc is not None and key_epoch(e.enc.key_id) < self.key_epoch:
            self.counters["reject.stale-key"] += 1
            self._reply(src, "NACK", e.id, reason="stale-key", detail=e.enc.key_id)
            return
        info = self.routing().group_for(topic)
        if info is None or info.parked:
            self._nack(src, e, "unavailable", "no live group for topic")
            return
        if info.primary != self.node_id:
            self._nack(src, e, "not-primary", "", primary=info.primary or "")
            return
        g = self.ensure_group(info.group_id, "primary")
        if e.id in g.ids:
            self._reply(src, "PUBACK", e.id, seq=str(g.ids[e.id]))
            return
        seq = g.next_seq
        g.next_seq += 1
        out = replace(e, seq=seq, headers={k: v for k, v in e.headers.items() if k not in ("verb", "tok")} | {"grp": g.group_id, "term": str(g.term)})
        self._buffer(g, out)
        self.evidence(tok.subject, "success")
        self.counters["pub.accepted"] += 1
        mirrors = [m for m in info.mirrors if m != self.node_id]
        for m in mirrors:
            self.send(m, out.with_headers(verb="REPL"))
        self._route(out, topic)
        if self.sync_mirroring and mirrors:
            self.sync_waiting[out.id] = (src, seq, set(mirrors))
        else:
            self._reply(src, "PUBACK", e.id, seq=str(seq))

    def _buffer(self, g: GroupState, e: Envelope) -> None:
        g.buffer.append(e)
        g.ids[e.id] = e.seq
        while len(g.buffer) > self.replay_capacity:
            old = g.buffer.popleft()
            g.ids.pop(old.id, None)

    def _route(self, e: Envelope, topic: str) -> None:
        for sub in list(self.subscriptions.values()):
            if match(sub.pattern, topic):
                self._deliver(sub, e)

    def _deliver(self, sub: Subscription, e: Envelope, attempts: int = 1) -> None:
        tok = self._session(sub.endpoint).tokens.get(sub.token_id)
        if tok is None or tok.token_id in self.verifier.revoked:
            self._drop_subscription(sub.sub_id, "token revoked")
            return
        key = (e.id, sub.sub_id)
        rec = self.records.get(key)
        if rec is not None and rec.state == "acked":
            return
        due = self.clock() + self.ack_timeout
        if rec is None:
            rec = self.records[key] = DeliveryRecord(e.id, sub.subscriber, sub.sub_id, attempts=attempts, due=due)
        else:
            rec.state, rec.attempts, rec.due = "pending", attempts, due
        heapq.heappush(self._due, (due, e.id, sub.sub_id, e))
        self.counters["deliver.out"] += 1
        self.send(sub.endpoint, e.with_headers(verb="MSG", sub=sub.sub_id))

    def _on_sub(self, src: str, e: Envelope) -> None:
        tok, why = self._token(src, e)
        if tok is None:
            self.evidence(e.sender, "failure")
            self.audit("auth", e.sender, event="subscribe-rejected", reason=why)
            self._nack(src, e, "auth", why)
            return
        wire_pattern = e.headers.get("pattern", "")
        pattern = self.resolve(wire_pattern)
        try:
            validate_pattern(pattern)
        except TopicError as exc:
            self._nack(src, e, "protocol", str(exc))
            return
        system = pattern.startswith(SYSTEM_PREFIX)
        if not system and ("subscribe" not in tok.rights or not covers(tok.pattern, pattern)):
            self.audit("authz", tok.subject, event="deny", op="subscribe", topic=pattern, reason="token-scope")
            self._nack(src, e, "authz", "pattern exceeds token scope")
            return
        if system and pattern != KMF_REVOCATION:
            self._nack(src, e, "authz", "system topic")
            return
        if not system and tok.auth_strength < self.floor():
            self._nack(src, e, "strength", "below floor")
            return
        if not system and self.authorizer is not None:
            d = self.authorizer.evaluate(CompositeKey(tok.subject, tok.auth_strength, time=self.clock()), "subscribe", pattern)
            if not d.allowed:
                self._nack(src, e, "authz", d.reason)
                return
        sub = self._find_subscription(src, wire_pattern)
        if sub is None:
            sub = Subscription(new_id(self.rng), tok.subject, src, pattern, tok.token_id, self.clock(), wire_pattern)
            self.subscriptions[sub.sub_id] = sub
        else:
            sub.token_id = tok.token_id
        self._reply(src, "SUBOK", e.id, sub=sub.sub_id, pattern=wire_pattern)
        if not system:
            self._shadow(sub, tok)
        # replay buffered envelopes the subscriber asked for
        try:
            start = json.loads(e.headers.get("from", "{}"))
        except ValueError:
            start = {}
        for gid, (from_term, from_seq) in sorted(start.items()):
            g = self.groups.get(gid)
            if g is None or g.role != "primary":
                continue
            for env in list(g.buffer):
                if (int(env.headers.get("term", 0)), env.seq) >= (from_term, from_seq) and match(
                    pattern, self.resolve(env.topic)
                ):
                    self._deliver(sub, env)

    def _find_subscription(self, endpoint: str, wire_pattern: str) -> Optional[Subscription]:
        for sub in self.subscriptions.values():
            if sub.endpoint == endpoint and sub.wire_pattern == wire_pattern:
                return sub
        return None

    def _shadow(self, sub: Subscription, tok: SecurityToken) -> None:
        """Copy a subscription to the mirrors so a promoted mirror keeps delivering."""
        mirrors = sorted({m for g in self.routing().groups if g.primary == self.node_id for m in g.mirrors} - {self.node_id})
        if not mirrors:
            return
        e = Envelope(
            id=new_id(self.rng),
            topic=SYSTEM_PREFIX + "ctl",
            sender=self.node_id,
            ts=int(self.clock() * 1000),
            headers={"verb": "REPLSUB", "sub": sub.sub_id, "endpoint": sub.endpoint, "pattern": sub.wire_pattern,
                     "token": tok.encode()},
        )
        for m in mirrors:
            self.send(m, e)

    def _on_replsub(self, src: str, e: Envelope) -> None:
        if src not in set(self.peers()):
            self._nack(src, e, "authz", "shadow subscription from unknown endpoint")
            return
        try:
            tok = SecurityToken.decode(e.headers["token"])
        except (KeyError, ValueError, TypeError):
            return
        # the token is signed by the KMF, so the mirror does not take the primary's word for it
        if not self.verifier.verify(tok, int(self.clock() * 1000)).valid:
            return
        endpoint = e.headers.get("endpoint", "")
        sess = self._session(endpoint)
        sess.principal = tok.subject
        sess.tokens[tok.token_id] = tok
        wire_pattern = e.headers.get("pattern", "")
        if self._find_subscription(endpoint, wire_pattern) is None:
            sub = Subscription(e.headers.get("sub", ""), tok.subject, endpoint, self.resolve(wire_pattern), tok.token_id,
                               self.clock(), wire_pattern)
            self.subscriptions[sub.sub_id] = sub

    def _on_unsub(self, src: str, e: Envelope) -> None:
        sub = self.subscriptions.get(e.headers.get("sub", ""))
        if sub is not None and sub.endpoint == src:
            self._drop_subscription(sub.sub_id, "unsubscribed")
        self._reply(src, "UNSUBOK", e.id)

    def _drop_subscription(self, sub_id: str, why: str) -> None:
        sub = self.subscriptions.pop(sub_id, None)
        if sub is not None:
            self.audit("authz", sub.subscriber, event="subscription-dropped", sub=sub_id, reason=why)

    def ack(self, envelope_id: str, sub_id: str) -> None:
        rec = self.records.get((envelope_id, sub_id))
        if rec is not None and rec.state == "pending":
            rec.state = "acked"
            self.counters["ack.in"] += 1

    def _on_ack(self, src: str, e: Envelope) -> None:
        self.ack(e.headers.get("ref", ""), e.headers.get("sub", ""))

    def _on_repl(self, src: str, e: Envelope) -> None:
        gid = e.headers.get("grp", DEFAULT_GROUP)
        g = self.groups.get(gid) or self.ensure_group(gid, "mirror")
        if g.role == "primary":
            return
        if e.seq is None or e.id in g.ids:
            return
        if e.seq != g.next_seq:
            self.counters["repl.gap"] += 1
            log.debug("%s: replication gap in %s: got %s expected %s", self.node_id, gid, e.seq, g.next_seq)
        g.next_seq = e.seq + 1
        self._buffer(g, e.without_headers("verb"))
        self.counters["repl.in"] += 1
        if self.sync_mirroring:
            self._reply(src, "REPLACK", e.id, grp=gid)

    def _on_replack(self, src: str, e: Envelope) -> None:
        ref = e.headers.get("ref", "")
        waiting = self.sync_waiting.get(ref)
        if waiting is None:
            return
        endpoint, seq, outstanding = waiting
        outstanding.discard(e.sender)
        if not outstanding:
            del self.sync_waiting[ref]
            self._reply(endpoint, "PUBACK", ref, seq=str(seq))

    def _on_control(self, src: str, e: Envelope) -> None:
        """Revocation notices: apply, fan out locally, forward to peers."""
        if e.id in self.seen_control:
            return
        self.seen_control.add(e.id)
        if e.topic == KMF_REVOCATION:
            try:
                notice = RevocationNotice.from_json(json.loads(e.payload))
            except (ValueError, KeyError):
                log.warning("malformed revocation notice %s", e.id)
                return
            self.apply_notice(notice)
        for sub in list(self.subscriptions.values()):
            if match(sub.pattern, e.topic):
                self.send(sub.endpoint, e.with_headers(verb="MSG", sub=sub.sub_id))
        fwd = e.with_headers(verb="FWD")
        for peer in self.peers():
            if peer != self.node_id and peer != src:
                self.send(peer, fwd)

    def _on_fwd(self, src: str, e: Envelope) -> None:
        if src != self.kmf_endpoint and src not in set(self.peers()):
            self._nack(src, e, "authz", "control forward from unknown endpoint")
            return
        self._on_control(src, e)

    def apply_notice(self, notice: RevocationNotice) -> None:
        self.verifier.apply_notice(notice)
        self.key_epoch = max(self.key_epoch, notice.epoch)
        if notice.revoked != "ALL":
            revoked = set(notice.revoked)
            for sub in list(self.subscriptions.values()):
                if sub.token_id in revoked:
                    self._drop_subscription(sub.sub_id, "token revoked")

    # timers

    def tick(self) -> None:
        """Redeliver unacked envelopes whose timer ran out."""
        now = self.clock()
        while self._due and self._due[0][0] <= now:
            due, eid, sub_id, env = heapq.heappop(self._due)
            rec = self.records.get((eid, sub_id))
            if rec is None or rec.state != "pending" or rec.due != due:
                continue
            sub = self.subscriptions.get(sub_id)
            if sub is None or rec.attempts >= self.max_redelivery:
                rec.state = "expired"
                self.counters["deliver.expired"] += 1
                continue
            self.counters["deliver.redelivered"] += 1
            self._deliver(sub, env, rec.attempts + 1)

    def crash(self) -> None:
        """Stop dead: no cleanup, no further output."""
        self.alive = False

    def pending_records(self) -> list[DeliveryRecord]:
        return [r for r in self.records.values() if r.state == "pending"]

    def drain_counters(self) -> Counter:
        c, self.counters = self.counters, Counter()
        return c

    _verbs = {
        "AUTH": _on_auth,
        "PUB": _on_pub,
        "SUB": _on_sub,
        "UNSUB": _on_unsub,
        "ACK": _on_ack,
        "REPL": _on_repl,
        "REPLACK": _on_replack,
        "REPLSUB": _on_replsub,
        "FWD": _on_fwd,
    }
