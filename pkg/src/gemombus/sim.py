"""Deterministic scenario runner on a virtual clock.

Every component runs in-process.  Messages between endpoints travel as
real frames (encoded, scanned for key material, decoded) over an
in-process network with fixed latency, so link faults and interposers see
exactly what an on-path attacker would.
"""

from __future__ import annotations

import base64
import csv
import heapq
import json
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import crypto
from .asm import Actuators, AdaptationManager, AsmParams, Goal, Goals, SensorHub
from .audit import AuditLog
from .authz import Authorizer, policy_from_json
from .broker import Broker
from .client import Client
from .kmf import Kmf, SecurityToken, TokenVerifier
from .monitoring import Monitor, MetricSample, Threshold
from .overlay import GNode, GroupUnavailable, OverlayManager
from .scenario import load_scenario, validate_scenario
from .topics import match
from .trust import TrustEngine, aggregate_trust
from .wire import KMF_REVOCATION, Envelope, decode_envelope, encode_envelope, metrics_topic, new_id

log = logging.getLogger(__name__)

KMF_EP = "kmf"
MONITOR_EP = "monitor"
OVERLAY_EP = "overlay"

# lets every provisioned principal publish and subscribe anywhere outside the system tree
DEFAULT_POLICY = {
    "version": 1,
    "rules": [{"groups": ["clients", "owners"], "pattern": "#", "operations": ["publish", "subscribe"]}],
}


class Sim:
    """Single-threaded discrete-event scheduler; ties break in insertion order."""

    def __init__(self):
        self.now = 0.0
        self._q: list = []
        self._n = 0

    def at(self, t: float, fn: Callable, *args) -> None:
        self._n += 1
        heapq.heappush(self._q, (t, self._n, fn, args))

    def after(self, dt: float, fn: Callable, *args) -> None:
        self.at(self.now + dt, fn, *args)

    def every(self, period: float, fn: Callable, start: float = 0.0, until: float = float("inf")) -> None:
        def tick():
            fn()
            if self.now + period <= until:
                self.after(period, tick)

        self.at(start, tick)

    def run(self, until: float) -> None:
        q = self._q
        while q and q[0][0] <= until:
            t, _, fn, args = heapq.heappop(q)
            self.now = t
            fn(*args)
        self.now = until


class FrameCapture:
    """Accumulates wire bytes and scans them for raw or encoded key material."""

    OVERLAP = 64  # longest encoded form of a 256-bit key (hex)

    def __init__(self, secrets: Callable[[], list], chunk: int = 8 << 20, path: Optional[str] = None):
        self.secrets = secrets
        self.chunk = chunk
        self.buf = bytearray()
        self.frames = 0
        self.bytes = 0
        self.leaks: list[str] = []
        self._fh = open(path, "wb") if path else None

    def observe(self, frame: bytes) -> None:
        self.frames += 1
        self.bytes += len(frame)
        self.buf += frame
        if self._fh is not None:
            self._fh.write(frame)
        if len(self.buf) >= self.chunk:
            self.scan()

    def scan(self) -> None:
        data = bytes(self.buf)
        # keep a tail so material straddling two chunks is still seen
        self.buf = bytearray(data[-self.OVERLAP:])
        for key_id, material in self.secrets():
            forms = (material, base64.b64encode(material), material.hex().encode())
            if key_id not in self.leaks and any(f in data for f in forms):
                self.leaks.append(key_id)

    def close(self) -> None:
        self.scan()
        if self._fh is not None:
            self._fh.close()


class Network:
    def __init__(self, sim: Sim, latency: float, capture: Optional[FrameCapture], rng: random.Random):
        self.sim = sim
        self.latency = latency
        self.capture = capture
        self.rng = rng
        self.endpoints: dict[str, Callable[[str, Envelope], None]] = {}
        self.down: set[str] = set()
        self.interposers: list[Callable[[str, str, Envelope], bool]] = []
        self.sent = 0
        self.dropped = 0

    def attach(self, name: str, handler: Callable[[str, Envelope], None]) -> None:
        self.endpoints[name] = handler

    def send(self, src: str, dst: str, env: Envelope) -> None:
        if src in self.down:
            return
        frame = encode_envelope(env)
        self.sent += 1
        if self.capture is not None:
            self.capture.observe(frame)
        for drop in self.interposers:
            if drop(src, dst, env):
                self.dropped += 1
                return
        self.sim.after(self.latency, self._deliver, src, dst, frame)

    def _deliver(self, src: str, dst: str, frame: bytes) -> None:
        if dst in self.down:
            self.dropped += 1
            return
        handler = self.endpoints.get(dst)
        if handler is None:
            self.dropped += 1
            return
        handler(src, decode_envelope(frame))


@dataclass
class MsgRecord:
    topic: str
    publisher: str
    t_pub: float
    expected: tuple
    acked: set = field(default_factory=set)
    gave_up: bool = False


class Ledger:
    """Ground truth for delivery: who should get what, and who did."""

    def __init__(self, bucket_s: float = 1.0):
        self.msgs: dict[str, MsgRecord] = {}
        self.bucket_s = bucket_s
        self.buckets: dict[int, list] = defaultdict(lambda: [0, 0])
        self.published_per_topic: dict[str, int] = defaultdict(int)

    def published(self, msg_id: str, topic: str, publisher: str, t: float, expected: tuple) -> None:
        self.msgs[msg_id] = MsgRecord(topic, publisher, t, expected)
        self.published_per_topic[topic] += 1
        self.buckets[int(t // self.bucket_s)][0] += len(expected)

    def received(self, msg_id: str, subscriber: str) -> None:
        m = self.msgs.get(msg_id)
        if m is None or subscriber not in m.expected or subscriber in m.acked:
            return
        m.acked.add(subscriber)
        self.buckets[int(m.t_pub // self.bucket_s)][1] += 1

    def gave_up(self, msg_id: str) -> None:
        m = self.msgs.get(msg_id)
        if m is not None:
            m.gave_up = True

    def totals(self) -> tuple[int, int]:
        expected = sum(len(m.expected) for m in self.msgs.values())
        acked = sum(len(m.acked) for m in self.msgs.values())
        return expected, acked

    def ratio(self) -> float:
        expected, acked = self.totals()
        return 1.0 if expected == 0 else acked / expected

    def window_ratio(self, now: float, window_s: float = 10.0, grace_s: float = 2.0) -> float:
        hi = int((now - grace_s) // self.bucket_s)
        lo = int((now - grace_s - window_s) // self.bucket_s)
        exp = acked = 0
        for b in range(lo, hi):
            e, a = self.buckets.get(b, (0, 0))
            exp += e
            acked += a
        return 1.0 if exp == 0 else acked / exp


class _SimActuators(Actuators):
    def __init__(self, world: "World"):
        self.w = world

    def rotate_keys(self, bits: int) -> None:
        self.w.revoke_all(bits, "threat")

    def revoke_all(self) -> None:
        self.w.revoke_all(self.w.kmf.threat_bits, "threat")

    def set_floor(self, n: int) -> None:
        self.w.authorizer.set_floor(n)

    def failover(self, group: str) -> None:
        info = self.w.overlay.table.get(group)
        node = self.w.overlay.nodes.get(info.primary) if info else None
        if node is not None and node.status == "dead":
            try:
                self.w.overlay.failover(group)
            except GroupUnavailable:
                pass

    def thresholds_profile(self, profile: str) -> None:
        self.w.monitor.set_profile(profile)


class World:
    """All components of one scenario run, wired together."""

    def __init__(self, sc: dict, out_dir: Optional[str] = None):
        self.sc = sc
        self.seed = sc["seed"]
        self.rng = random.Random(self.seed)
        self.sim = Sim()
        now = lambda: self.sim.now  # noqa: E731
        self.audit = AuditLog(clock=now)
        mon = sc.get("monitoring", {})
        self.monitor = Monitor(
            lam=mon.get("lambda", 0.1),
            z_max=mon.get("z_max", 6.0),
            warmup=mon.get("warmup", 5),
            relearn_after=mon.get("relearn_after", 30),
            audit=self.audit,
        )
        self.trust = TrustEngine()
        self.kmf = Kmf(KMF_EP, clock=lambda: self.sim.now * 1000.0, rng=random.Random(self.rng.getrandbits(64)),
                       audit=self.audit)
        capture = None
        if sc.get("capture_frames", True):
            capture = FrameCapture(
                lambda: [(k.key_id, k.material) for k in self.kmf.keys.values()],
                path=str(Path(out_dir) / "frames.bin") if out_dir and sc.get("save_frames") else None,
            )
        self.capture = capture
        self.net = Network(self.sim, sc["latency_s"], capture, random.Random(self.rng.getrandbits(64)))
        self.ledger = Ledger()
        self.hub = SensorHub()
        self.directory: dict[str, tuple] = {}
        self.threshold_events: list = []
        topo = sc["topology"]
        ov = sc.get("overlay", {})
        self.heartbeat_s = ov.get("heartbeat_s", 1.0)
        self.period = sc.get("asm", {}).get("period_s", 1.0)
        self.brokers: dict[str, Broker] = {}
        self.pseudonym_secret = self.rng.getrandbits(256).to_bytes(32, "big") if sc["pseudonyms"] else None
        bk = sc.get("broker", {})
        self.authorizer = Authorizer(self.directory, audit=self.audit)
        self.authorizer.install(policy_from_json(sc.get("policy") or DEFAULT_POLICY))
        self.overlay = OverlayManager(
            groups=topo["groups"],
            replication_factor=topo["replication_factor"],
            suspect_timeout=ov.get("suspect_timeout_s", 5.0),
            dead_timeout=ov.get("dead_timeout_s", 15.0),
            clock=now,
            promote=lambda node, group, term: self.brokers[node].promote(group, term),
            last_seq=lambda node, group: self.brokers[node].last_seq(group),
            on_node_added=lambda nid: self.trust.open(nid, self.sim.now),
            audit=self.audit,
        )
        for spec in topo["nodes"]:
            nid = spec["id"]
            role = spec.get("role", "operational")
            if role != "operational":
                self.overlay.add_node(GNode(nid, role))
                continue
            b = Broker(
                nid,
                verifier=TokenVerifier(self.kmf.public_key),
                send=lambda dst, env, nid=nid: self.net.send(nid, dst, env),
                routing=lambda: self.overlay.table,
                clock=now,
                authorizer=self.authorizer,
                floor=lambda: self.authorizer.floor,
                pseudonym_secret=self.pseudonym_secret,
                kmf_endpoint=KMF_EP,
                kmf_id=KMF_EP,
                peers=lambda: sorted(self.brokers),
                max_redelivery=bk.get("max_redelivery", 3),
                ack_timeout=bk.get("ack_timeout_s", 1.0),
                replay_capacity=bk.get("replay_capacity", 10_000),
                sync_mirroring=topo["sync_mirroring"],
                audit=self.audit,
                evidence=self._evidence,
                rng=random.Random(self.rng.getrandbits(64)),
            )
            self.brokers[nid] = b
            self.net.attach(nid, b.handle)
            self.overlay.add_node(GNode(nid, role))
        self.net.attach(KMF_EP, self._kmf_handle)
        self.net.attach(MONITOR_EP, self._monitor_handle)
        self.net.attach(OVERLAY_EP, self._overlay_handle)
        for b in self.brokers.values():
            self.monitor.add_threshold(Threshold(f"{b.node_id}.auth_failures", hi=5.0, severity="critical"))
        asm_cfg = sc.get("asm", {})
        params = AsmParams(**{k: v for k, v in asm_cfg.items() if k in AsmParams.__dataclass_fields__})
        goals = Goals()
        if sc.get("goals"):
            goals = Goals(tuple(Goal(**g) for g in sc["goals"].get("constraints", ())) or Goals().constraints)
        self.asm = AdaptationManager(
            self.hub,
            _SimActuators(self),
            state_probe=self._probe,
            params=params,
            goals=goals,
            clock=now,
            audit=self.audit,
            record_metric=lambda m, v: self.monitor.record_sample(MetricSample(m, v, self.sim.now, "asm")),
        )
        self.authorizer.set_floor(params.baseline_floor)
        self.clients: dict[str, Client] = {}
        self.sub_patterns: dict[str, list] = {}
        self.keypairs: dict[str, object] = {}
        self.tokens: dict[str, list] = defaultdict(list)
        self._build_workload()

    # plumbing

    def _evidence(self, entity: str, outcome: str) -> None:
        self.trust.observe(entity, outcome, self.sim.now)
        leaf = "authentication.failures"
        self.trust.observe(leaf, outcome, self.sim.now)

    def _kmf_handle(self, src: str, env: Envelope) -> None:
        self.net.send(KMF_EP, src, self.kmf.handle(env))

    def _monitor_handle(self, src: str, env: Envelope) -> None:
        body = json.loads(env.payload)
        metric = env.topic.split("/", 3)[-1]
        mid = f"{src}.{metric}"
        events = self.monitor.record_sample(MetricSample(mid, body["value"], body["ts"] / 1000.0, src))
        for ev in events:
            self.threshold_events.append(ev)
            if ev.severity == "critical":
                self.hub.push_fault(("threshold", ev.metric_id, ev.value))
                self.trust.observe(src, "failure", self.sim.now)
        # only a surge in traffic or failures signals attack pressure; quiet is not a threat
        z = self.monitor.rows[-1][4]
        self.hub.set_anomaly(mid, self.monitor.scores[mid] if z > 0 else 0.0, self.sim.now)

    def _overlay_handle(self, src: str, env: Envelope) -> None:
        body = json.loads(env.payload)
        self.overlay.heartbeat(src, self.sim.now, body.get("groups"))

    def revoke_all(self, bits: int, reason: str) -> None:
        notice = self.kmf.revoke_all(bits, reason)
        env = self.kmf.revocation_envelope(notice).with_headers(verb="FWD")
        for nid in sorted(self.brokers):
            self.net.send(KMF_EP, nid, env)

    def _probe(self) -> dict:
        tree = self.monitor.tree
        leaf_vals = {leaf: self.trust.values(leaf) for leaf in tree.leaves()}
        root = aggregate_trust(tree, leaf_vals)[tree.root()]
        return {
            "overlay_health": self.overlay.health(),
            "delivery_ratio": self.ledger.window_ratio(self.sim.now),
            "root_trustworthiness": root.trustworthiness,
            "dead_primaries": self.overlay.dead_primaries(),
        }

    # workload

    def _principal(self, name: str, groups=("clients",)) -> object:
        key = crypto.generate_keypair()
        self.keypairs[name] = key
        self.kmf.register_principal(name, crypto.public_bytes(key), groups)
        self.directory[name] = tuple(groups)
        self.trust.open(name, 0.0)
        return key

    def _client(self, name: str, encrypt: bool, sign: bool) -> Client:
        c = Client(
            name,
            self.keypairs[name],
            send=lambda dst, env, name=name: self.net.send(name, dst, env),
            routing=lambda: self.overlay.table,
            clock=lambda: self.sim.now,
            kmf_endpoint=KMF_EP,
            kmf_public_key=self.kmf.public_key,
            pseudonym_secret=self.pseudonym_secret,
            encrypt=encrypt,
            sign=sign,
            rng=random.Random(self.rng.getrandbits(64)),
        )
        self.clients[name] = c
        self.net.attach(name, c.handle)
        return c

    def _issue(self, name: str, pattern: str, rights, strength: int) -> SecurityToken:
        ttl = int((self.sc["duration_s"] + self.sc["drain_s"] + 3600) * 1000)
        tok = self.kmf.issue_token(name, pattern, rights, strength, ttl)
        self.tokens[name].append(tok)
        return tok

    def _build_workload(self) -> None:
        wl = self.sc["workload"]
        topics = list(wl["topics"])
        for ev in self.sc["events"]:
            if ev["kind"] in ("flood", "selective_drop") and ev["topic"] not in topics:
                topics.append(ev["topic"])
        self.topics = topics
        owner = "owner"
        self._principal(owner, ("owners",))
        for t in topics:
            self.kmf.register_secure_topic(t, owner, 128)
            self.kmf.grant(t, "group:clients")
        for b in self.brokers.values():
            b.learn_topics(topics)
        strength = wl["auth_strength"]
        self.publishers = []
        for i in range(wl["publishers"]):
            name = f"pub{i}"
            self._principal(name)
            c = self._client(name, wl["encrypt"], wl["sign"])
            for t in topics:
                c.add_token(self._issue(name, t, ["publish"], strength))
            c.on_giveup = lambda mid, reason: self.ledger.gave_up(mid)
            self.publishers.append(c)
        self.subscribers = []
        for i in range(wl["subscribers"]):
            name = f"sub{i}"
            self._principal(name)
            c = self._client(name, wl["encrypt"], wl["sign"])
            for t in topics:
                c.add_token(self._issue(name, t, ["subscribe"], strength))
            c.on_message = lambda env, payload, name=name: self.ledger.received(env.id, name)
            self.subscribers.append(c)
            self.sub_patterns[name] = list(topics)

    def _expected(self, topic: str) -> tuple:
        return tuple(
            name
            for name, pats in sorted(self.sub_patterns.items())
            if self.clients[name].alive and any(match(p, topic) for p in pats)
        )

    def _schedule_publisher(self, c: Client, rate: float, start: float, stop: float, budget: Optional[int],
                            topics: list, track: bool, rng: random.Random) -> None:
        wl = self.sc["workload"]
        payload_len = wl["payload_bytes"]
        state = {"n": 0}

        def fire():
            if budget is not None and state["n"] >= budget:
                return
            t = self.sim.now
            if t > stop:
                return
            topic = topics[state["n"] % len(topics)]
            state["n"] += 1
            mid = new_id(rng)
            if track:
                self.ledger.published(mid, topic, c.principal, t, self._expected(topic))
            payload = rng.getrandbits(8 * payload_len).to_bytes(payload_len, "big") if payload_len else b""
            c.publish(topic, payload, mid)
            gap = rng.expovariate(rate) if wl["poisson"] else 1.0 / rate
            self.sim.after(gap, fire)

        self.sim.at(start, fire)

    # periodic tasks

    def _heartbeats(self) -> None:
        for nid in sorted(self.brokers):
            b = self.brokers[nid]
            if not b.alive:
                continue
            body = {"groups": {g: st.last_seq for g, st in sorted(b.groups.items())}, "ts": int(self.sim.now * 1000)}
            env = Envelope(new_id(b.rng), metrics_topic(nid, "heartbeat"), nid, int(self.sim.now * 1000),
                           payload=json.dumps(body, sort_keys=True).encode())
            self.net.send(nid, OVERLAY_EP, env)

    def _metrics(self) -> None:
        for nid in sorted(self.brokers):
            b = self.brokers[nid]
            if not b.alive:
                continue
            c = b.drain_counters()
            values = {
                "msg_rate": (c["pub.accepted"] + c["repl.in"]) / self.period,
                "auth_failures": float(c["reject.auth"]),
            }
            for metric, value in values.items():
                env = Envelope(new_id(b.rng), metrics_topic(nid, metric), nid, int(self.sim.now * 1000),
                               payload=json.dumps({"value": value, "ts": int(self.sim.now * 1000)}).encode())
                self.net.send(nid, MONITOR_EP, env)

    def _control(self) -> None:
        self.overlay.detect_failure(self.sim.now)
        for principal, value in sorted(self.trust.suspicion().items()):
            if principal in self.directory:
                self.hub.set_suspicion(principal, value, self.sim.now)
        rep = self.asm.control_step(self.sim.now)
        delivered_ok = rep.s.delivery_ratio >= 0.995
        self.trust.observe("availability.delivery", "success" if delivered_ok else "failure", self.sim.now)
        self.trust.observe("availability.overlay", "success" if rep.s.overlay_health >= 1.0 else "failure", self.sim.now)
        self.trust.observe("confidentiality.key_strength", "success" if rep.s.key_bits >= 128 else "failure", self.sim.now)
        self.trust.observe("confidentiality.key_age", "success", self.sim.now)
        self.trust.observe("authorization.denials", "success", self.sim.now)
        self.trust.observe("authentication.token_failures", "success", self.sim.now)
        expected, acked = self.ledger.totals()
        self.delivery_rows.append((round(self.sim.now, 6), expected, acked, 1.0 if expected == 0 else acked / expected))

    def _ticks(self) -> None:
        for nid in sorted(self.brokers):
            self.brokers[nid].tick()
        for name in sorted(self.clients):
            self.clients[name].tick()

    # faults

    def inject(self, ev: dict) -> None:
        kind = ev["kind"]
        self.audit("adapt", "harness", event="inject", kind=kind, params={k: v for k, v in ev.items() if k != "kind"})
        if kind == "broker_crash":
            node = ev["node"]
            if node not in self.brokers:
                raise KeyError(f"unknown node {node}")
            self.brokers[node].crash()
            self.net.down.add(node)
        elif kind == "link_drop":
            rate = ev["rate"]
            rng = random.Random(self.rng.getrandbits(64))
            src, dst = ev.get("src"), ev.get("dst")

            def drop(s, d, env):
                if (src is None or s == src) and (dst is None or d == dst):
                    return rng.random() < rate
                return False

            self.net.interposers.append(drop)
        elif kind == "selective_drop":
            target = ev["topic"]
            if target not in self.topics:
                raise KeyError(f"unknown topic {target}")
            # the interposer only sees wire bytes; it matches the literal topic field
            self.net.interposers.append(lambda s, d, env: env.topic == target)
        elif kind == "flood":
            topic = ev["topic"]
            name = f"flooder{len([c for c in self.clients if c.startswith('flooder')])}"
            self._principal(name)
            c = self._client(name, self.sc["workload"]["encrypt"], False)
            c.add_token(self._issue(name, topic, ["publish"], self.sc["workload"]["auth_strength"]))
            stop = ev["at_s"] + ev.get("duration_s", self.sc["duration_s"] - ev["at_s"])
            self._schedule_publisher(c, ev["rate_mps"], self.sim.now, stop, None, [topic], False,
                                     random.Random(self.rng.getrandbits(64)))
        elif kind == "credential_misuse":
            principal = ev["principal"]
            if principal not in self.directory:
                raise KeyError(f"unknown principal {principal}")
            count = ev.get("count", 10)
            interval = ev.get("interval_s", 0.1)
            target = sorted(self.brokers)[0]
            forger = crypto.generate_keypair()
            rogue = Kmf("rogue", clock=lambda: self.sim.now * 1000.0, root_key=forger)
            rogue.register_principal(principal, crypto.public_bytes(forger))
            for i in range(count):
                def attempt():
                    primary = self.overlay.table.groups[0].primary or target
                    tok = rogue.issue_token(principal, "#", ["publish", "subscribe"], 5, 60_000)
                    env = Envelope(new_id(self.rng), "_gemom/ctl", principal, int(self.sim.now * 1000),
                                   headers={"verb": "AUTH", "token": tok.encode()})
                    self.net.send(f"attacker:{principal}", primary, env)

                self.sim.after(i * interval, attempt)

    # running

    def run(self) -> "RunReport":
        sc = self.sc
        wl = sc["workload"]
        duration, drain = sc["duration_s"], sc["drain_s"]
        end = duration + drain
        self.delivery_rows: list = []
        for c in self.clients.values():
            c.subscribe(KMF_REVOCATION)
        for name in sorted(self.sub_patterns):
            for p in self.sub_patterns[name]:
                self.clients[name].subscribe(p)
        n_pub = len(self.publishers)
        if n_pub and wl["rate_mps"] > 0:
            per_rate = wl["rate_mps"] / n_pub
            budget = None
            if wl["messages"] is not None:
                budget = wl["messages"] // n_pub
            for i, c in enumerate(self.publishers):
                extra = 1 if wl["messages"] is not None and i < wl["messages"] % n_pub else 0
                self._schedule_publisher(c, per_rate, 0.1, duration, None if budget is None else budget + extra,
                                         self.topics if len(wl["topics"]) == 0 else list(wl["topics"]), True,
                                         random.Random(self.rng.getrandbits(64)))
        for ev in sorted(sc["events"], key=lambda e: e["at_s"]):
            self.sim.at(ev["at_s"], self.inject, ev)
        self.sim.every(0.25, self._ticks, start=0.25, until=end)
        self.sim.every(self.heartbeat_s, self._heartbeats, start=self.heartbeat_s, until=end)
        self.sim.every(self.period, self._metrics, start=self.period, until=end)
        self.sim.every(self.period, self._control, start=1.5 * self.period, until=end)
        self.sim.run(end)
        if self.capture is not None:
            self.capture.close()
        return self._report()

    def _report(self) -> "RunReport":
        expected, acked = self.ledger.totals()
        # classify every (message, subscriber) pair exactly once
        expired = set()
        for b in self.brokers.values():
            for (eid, _), rec in b.records.items():
                if rec.state == "expired":
                    expired.add((eid, rec.subscriber))
        per_topic = {}
        for t in sorted(set(self.ledger.published_per_topic)):
            per_topic[t] = {"published": 0, "expected": 0, "acked": 0, "lost": 0, "in_flight": 0}
        for mid, m in self.ledger.msgs.items():
            row = per_topic[m.topic]
            row["published"] += 1
            for s in m.expected:
                row["expected"] += 1
                if s in m.acked:
                    row["acked"] += 1
                elif m.gave_up or (mid, s) in expired:
                    row["lost"] += 1
                else:
                    row["in_flight"] += 1
        for row in per_topic.values():
            row["ratio"] = 1.0 if row["expected"] == 0 else row["acked"] / row["expected"]
        self.delivery_rows.append((round(self.sim.now, 6), expected, acked, self.ledger.ratio()))
        workload_s = self.sc["duration_s"]
        throughput = (len(self.ledger.msgs) / workload_s) if workload_s > 0 else 0.0
        actions = []
        for rep in self.asm.reports:
            for a in rep.actions:
                actions.append({"step": rep.step, "ts": round(rep.ts, 6), "action": a.label(), "cause": a.cause})
        trust_final = {}
        for eid in sorted(self.trust.records):
            r = self.trust.records[eid]
            v = self.trust.values(eid)
            trust_final[eid] = {"alpha": r.alpha, "beta": r.beta, "trust": v.trust, "confidence": v.confidence,
                                "trustworthiness": v.trustworthiness}
        return RunReport(
            name=self.sc["name"],
            seed=self.seed,
            delivery_ratio=self.ledger.ratio(),
            throughput_mps=throughput,
            published=len(self.ledger.msgs),
            expected_deliveries=expected,
            acked_deliveries=acked,
            threat=[(round(r.ts, 6), r.s.threat) for r in self.asm.reports],
            steps=[r.audit_line() for r in self.asm.reports],
            actions=actions,
            overlay_actions=[a.line() for a in self.overlay.actions],
            trust=trust_final,
            trust_trace=list(self.trust.trace),
            threshold_events=[
                {"ts": e.at, "metric_id": e.metric_id, "severity": e.severity, "value": e.value, "bound": e.bound}
                for e in self.threshold_events
            ],
            per_topic=per_topic,
            delivery_rows=self.delivery_rows,
            messages=[(mid, m.topic, round(m.t_pub, 6), len(m.expected), len(m.acked)) for mid, m in self.ledger.msgs.items()],
            frames=self.capture.frames if self.capture else 0,
            key_leaks=sorted(set(self.capture.leaks)) if self.capture else [],
            metric_rows=list(self.monitor.rows),
            audit_counts={c: len(self.audit.by_category(c)) for c in ("auth", "authz", "key", "adapt", "overlay")},
        )


@dataclass
class RunReport:
    name: str
    seed: int
    delivery_ratio: float
    throughput_mps: float
    published: int
    expected_deliveries: int
    acked_deliveries: int
    threat: list
    steps: list
    actions: list
    overlay_actions: list
    trust: dict
    trust_trace: list
    threshold_events: list
    per_topic: dict
    delivery_rows: list
    messages: list
    frames: int
    key_leaks: list
    metric_rows: list
    audit_counts: dict
    failed: bool = False
    error: str = ""

    @classmethod
    def failed_run(cls, sc: dict, error: str) -> "RunReport":
        return cls(sc["name"], sc["seed"], 0.0, 0.0, 0, 0, 0, [], [], [], [], {}, [], [], {}, [], [], 0, [], [], {},
                   failed=True, error=error)

    def summary(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "failed": self.failed,
            "error": self.error,
            "delivery_ratio": self.delivery_ratio,
            "throughput_mps": self.throughput_mps,
            "published": self.published,
            "expected_deliveries": self.expected_deliveries,
            "acked_deliveries": self.acked_deliveries,
            "per_topic": self.per_topic,
            "threat": self.threat,
            "actions": self.actions,
            "overlay_actions": self.overlay_actions,
            "trust": self.trust,
            "threshold_events": self.threshold_events,
            "frames": self.frames,
            "key_leaks": self.key_leaks,
            "audit_counts": self.audit_counts,
        }


def run_scenario(path_or_doc, out_dir: Optional[str] = None) -> RunReport:
    """Run one scenario, optionally writing its artifacts to ``out_dir``."""
    sc = validate_scenario(path_or_doc) if isinstance(path_or_doc, dict) else load_scenario(path_or_doc)
    try:
        report = World(sc, out_dir).run()
    except Exception as exc:  # noqa: BLE001 - a component crash we did not inject fails the run
        log.exception("scenario %s failed", sc["name"])
        report = RunReport.failed_run(sc, f"{type(exc).__name__}: {exc}")
    if out_dir is not None:
        export_report(report, out_dir)
    return report


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def export_report(r: RunReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def path(name):
        p = out / name
        written.append(p)
        return p

    with open(path("report.json"), "w", encoding="utf-8") as fh:
        json.dump(r.summary(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(path("threat.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ts", "step", "threat", "actions", "cause"])
        for line in r.steps:
            w.writerow([_fmt(line["ts"]), line["step"], _fmt(line["threat"]), " ".join(line["actions"]), line["cause"]])
    with open(path("trust.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ts", "entity_id", "alpha", "beta", "trust", "confidence", "trustworthiness"])
        w.writerows([[_fmt(x) for x in row] for row in r.trust_trace])
    with open(path("delivery.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ts", "expected", "acked", "ratio"])
        w.writerows([[_fmt(x) for x in row] for row in r.delivery_rows])
    with open(path("messages.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["msg_id", "topic", "t_pub", "expected", "acked"])
        w.writerows([[_fmt(x) for x in row] for row in r.messages])
    with open(path("metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ts", "metric_id", "value", "ewma_mean", "z", "score"])
        w.writerows([[_fmt(x) for x in row] for row in r.metric_rows])
    series = out / "series"
    series.mkdir(exist_ok=True)
    columns = {"threat": [(ts, v) for ts, v in r.threat], "delivery_ratio": [(row[0], row[3]) for row in r.delivery_rows]}
    by_metric = defaultdict(list)
    for ts, mid, value, *_ in r.metric_rows:
        by_metric[mid].append((ts, value))
    columns.update({f"metric.{k}": v for k, v in by_metric.items()})
    for name, rows in sorted(columns.items()):
        with open(path(f"series/{name}.dat"), "w") as fh:
            fh.writelines(f"{_fmt(ts)} {_fmt(v)}\n" for ts, v in rows)
    return written
