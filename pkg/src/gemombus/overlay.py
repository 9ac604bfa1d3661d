"""Broker overlay management: membership, heartbeats, failover, QoS.

The manager owns the node and group tables and publishes an immutable
:class:`RoutingTable` snapshot that brokers and clients read.
"""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .broker import DEFAULT_GROUP, GroupInfo, RoutingTable

log = logging.getLogger(__name__)

ALIVE, SUSPECT, DEAD = "alive", "suspect", "dead"


class OverlayError(Exception):
    pass


class GroupUnavailable(OverlayError):
    pass


@dataclass
class GNode:
    id: str
    role: str = "operational"
    address: str = ""
    status: str = ALIVE
    last_heartbeat: float = 0.0


@dataclass(frozen=True)
class QoSSample:
    src: str
    dst: str
    rtt_ms: float
    loss_rate: float
    throughput_mps: float
    at: float

    def __post_init__(self):
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError(f"loss_rate out of [0,1]: {self.loss_rate}")
        if self.rtt_ms < 0 or self.throughput_mps < 0:
            raise ValueError("rtt and throughput must be non-negative")


@dataclass(frozen=True)
class OverlayAction:
    kind: str  # add-mirror | move-primary | rebalance | failover | parked
    group: str
    node: str
    ts: float

    def line(self) -> str:
        return f"ACTION {self.kind} {self.group} {self.node or '-'} {self.ts:.3f}"


@dataclass(frozen=True)
class ReconfigThresholds:
    loss: float = 0.1
    rtt_ms: float = 200.0
    load_skew: float = 1.0  # max/mean - 1
    smoothing: float = 1.0  # EWMA weight of the newest sample per link


def _smoothed(samples: Sequence[QoSSample], lam: float) -> dict:
    """Per directed link, EWMA of (rtt, loss) over samples in time order."""
    out: dict[tuple, list] = {}
    for s in sorted(samples, key=lambda s: (s.at, s.src, s.dst)):
        key = (s.src, s.dst)
        if key not in out:
            out[key] = [s.rtt_ms, s.loss_rate]
        else:
            cur = out[key]
            cur[0] = lam * s.rtt_ms + (1 - lam) * cur[0]
            cur[1] = lam * s.loss_rate + (1 - lam) * cur[1]
    return out


def decide_reconfiguration(
    samples: Sequence[QoSSample],
    thresholds: ReconfigThresholds,
    table: RoutingTable,
    now: float = 0.0,
) -> list[OverlayAction]:
    """Rule table over smoothed QoS; a pure function of its inputs.

    - loss above threshold on any link touching a group's primary: add a mirror
    - mean rtt on the primary's links above threshold: move the primary to the
      mirror with the lowest mean rtt (ties by node id)
    - throughput skew across sending nodes above threshold: rebalance the
      groups of the busiest node
    """
    links = _smoothed(samples, thresholds.smoothing)
    actions = []
    for g in sorted(table.groups, key=lambda g: g.group_id):
        if g.primary is None or g.parked:
            continue
        touching = [v for (a, b), v in links.items() if g.primary in (a, b)]
        if any(loss > thresholds.loss for _, loss in touching):
            actions.append(OverlayAction("add-mirror", g.group_id, "", now))
        if touching and sum(r for r, _ in touching) / len(touching) > thresholds.rtt_ms and g.mirrors:
            def mean_rtt(n):
                rs = [v[0] for (a, b), v in links.items() if n in (a, b)]
                return sum(rs) / len(rs) if rs else math.inf

            best = min(g.mirrors, key=lambda n: (mean_rtt(n), n))
            actions.append(OverlayAction("move-primary", g.group_id, best, now))
    load: dict[str, float] = {}
    for s in samples:
        load[s.src] = load.get(s.src, 0.0) + s.throughput_mps
    if len(load) >= 2:
        mean = sum(load.values()) / len(load)
        busiest = min(load, key=lambda n: (-load[n], n))
        if mean > 0 and load[busiest] / mean - 1 > thresholds.load_skew:
            for g in sorted(table.groups, key=lambda g: g.group_id):
                if g.primary == busiest:
                    actions.append(OverlayAction("rebalance", g.group_id, busiest, now))
    return actions


class OverlayManager:
    """The managerial control task for one overlay."""

    def __init__(
        self,
        groups: Mapping[str, Sequence[str]] = None,
        replication_factor: int = 2,
        suspect_timeout: float = 5.0,
        dead_timeout: float = 15.0,
        clock: Callable[[], float] = time.monotonic,
        promote: Callable[[str, str, int], None] = lambda node, group, term: None,
        last_seq: Optional[Callable[[str, str], int]] = None,
        on_node_added: Callable[[str], None] = lambda node_id: None,
        record_metric: Callable[[str, float, str], None] = lambda metric, value, source: None,
        audit: Optional[Callable[..., None]] = None,
    ):
        if replication_factor < 1:
            raise ValueError("replication_factor must be >= 1")
        if not 0 < suspect_timeout < dead_timeout:
            raise ValueError("need 0 < suspect_timeout < dead_timeout")
        self.replication_factor = replication_factor
        self.suspect_timeout = suspect_timeout
        self.dead_timeout = dead_timeout
        self.clock = clock
        self.promote = promote
        self.last_seq_fn = last_seq
        self.on_node_added = on_node_added
        self.record_metric = record_metric
        self.audit = audit or (lambda *a, **k: None)
        self.nodes: dict[str, GNode] = {}
        self.reported_seq: dict[tuple, int] = {}
        self.actions: list[OverlayAction] = []
        groups = groups or {DEFAULT_GROUP: ("#",)}
        self._table = RoutingTable(0, tuple(GroupInfo(gid, tuple(p), None) for gid, p in groups.items()))

    @property
    def table(self) -> RoutingTable:
        return self._table

    def _swap(self, info: GroupInfo) -> None:
        self._table = self._table.replace_group(info)

    def _log(self, kind: str, group: str, node: str) -> None:
        a = OverlayAction(kind, group, node, self.clock())
        self.actions.append(a)
        log.info(a.line())
        self.audit("overlay", "overlay-manager", event=kind, group=group, node=node)

    def add_node(self, n: GNode) -> None:
        if n.id in self.nodes:
            raise OverlayError(f"duplicate node id {n.id}")
        n.last_heartbeat = self.clock()
        self.nodes[n.id] = n
        self.on_node_added(n.id)
        if n.role != "operational":
            return
        for g in self._table.groups:
            if g.primary is None:
                self._swap(replace(g, primary=n.id, parked=False))
                self.promote(n.id, g.group_id, self._table.version)
                self._log("assign-primary", g.group_id, n.id)
            elif len(g.mirrors) + 1 < self.replication_factor:
                self._swap(replace(g, mirrors=g.mirrors + (n.id,)))
                self._log("add-mirror", g.group_id, n.id)

    def heartbeat(self, node_id: str, at: Optional[float] = None, group_seqs: Optional[Mapping[str, int]] = None) -> None:
        n = self.nodes.get(node_id)
        if n is None or n.status == DEAD:
            return
        n.last_heartbeat = self.clock() if at is None else at
        if n.status == SUSPECT:
            n.status = ALIVE
            self.audit("overlay", "overlay-manager", event="recovered", node=node_id)
        for gid, seq in (group_seqs or {}).items():
            self.reported_seq[(node_id, gid)] = seq

    def detect_failure(self, now: Optional[float] = None) -> list[str]:
        now = self.clock() if now is None else now
        newly_dead = []
        for n in sorted(self.nodes.values(), key=lambda n: n.id):
            silent = now - n.last_heartbeat
            if n.status == DEAD:
                continue
            if silent >= self.dead_timeout:
                n.status = DEAD
                newly_dead.append(n.id)
                self.audit("overlay", "overlay-manager", event="dead", node=n.id)
            elif silent >= self.suspect_timeout and n.status == ALIVE:
                n.status = SUSPECT
                self.audit("overlay", "overlay-manager", event="suspect", node=n.id)
        for nid in newly_dead:
            for g in self._table.groups:
                if g.primary == nid:
                    try:
                        self.failover(g.group_id)
                    except GroupUnavailable as exc:
                        log.error("%s", exc)
                elif nid in g.mirrors:
                    self._swap(replace(g, mirrors=tuple(m for m in g.mirrors if m != nid)))
        return newly_dead

    def _seq_of(self, node_id: str, group_id: str) -> int:
        if self.last_seq_fn is not None:
            return self.last_seq_fn(node_id, group_id)
        return self.reported_seq.get((node_id, group_id), 0)

    def failover(self, group_id: str) -> GroupInfo:
        """Promote the alive mirror holding the highest seq (ties by node id)."""
        g = self._table.get(group_id)
        if g is None:
            raise OverlayError(f"unknown group {group_id}")
        alive = [m for m in g.mirrors if self.nodes.get(m) and self.nodes[m].status != DEAD]
        if not alive:
            self._swap(replace(g, parked=True, mirrors=()))
            self._log("parked", group_id, "")
            raise GroupUnavailable(f"group {group_id} has no alive mirror")
        best = min(alive, key=lambda m: (-self._seq_of(m, group_id), m))
        info = replace(g, primary=best, mirrors=tuple(m for m in alive if m != best), parked=False)
        self._swap(info)
        self.promote(best, group_id, self._table.version)
        self._log("failover", group_id, best)
        return self._table.get(group_id)

    def health(self) -> float:
        """Fraction of operational nodes alive, discounting groups that are parked."""
        ops = [n for n in self.nodes.values() if n.role == "operational"]
        if not ops:
            return 1.0
        alive = sum(n.status == ALIVE for n in ops) / len(ops)
        groups = self._table.groups
        parked = sum(g.parked for g in groups) / len(groups) if groups else 0.0
        return alive * (1.0 - parked)

    def dead_primaries(self) -> tuple:
        return tuple(
            g.group_id
            for g in self._table.groups
            if g.primary and self.nodes.get(g.primary) and self.nodes[g.primary].status == DEAD
        )

    def measure_qos(
        self,
        a: str,
        b: str,
        probe: Callable[[str, str], Optional[float]],
        n_probes: int = 20,
        probe_size: int = 1,
    ) -> QoSSample:
        """Send probes over the normal path; ``probe`` returns rtt seconds or None if lost."""
        peer = self.nodes.get(b)
        if peer is None or peer.status == DEAD:
            s = QoSSample(a, b, 0.0, 1.0, 0.0, self.clock())
        else:
            rtts, lost = [], 0
            for _ in range(n_probes):
                r = probe(a, b)
                if r is None:
                    lost += 1
                else:
                    rtts.append(r)
            rtt_ms = 1000.0 * sum(rtts) / len(rtts) if rtts else 0.0
            busy = sum(rtts)
            tput = (len(rtts) * probe_size / busy) if busy > 0 else 0.0
            s = QoSSample(a, b, rtt_ms, lost / n_probes, tput, self.clock())
        self.record_metric("qos.rtt", s.rtt_ms, a)
        self.record_metric("qos.loss", s.loss_rate, a)
        self.record_metric("qos.throughput", s.throughput_mps, a)
        return s


def loopback_probe(a: str, b: str) -> float:
    """Time a real round trip through a local socket pair."""
    import socket

    x, y = socket.socketpair()
    try:
        t0 = time.perf_counter()
        x.sendall(b"p")
        y.recv(1)
        y.sendall(b"p")
        x.recv(1)
        return max(time.perf_counter() - t0, 1e-9)
    finally:
        x.close()
        y.close()


def lossy_probe(loss: float, rtt: float, rng: random.Random) -> Callable[[str, str], Optional[float]]:
    def probe(a: str, b: str) -> Optional[float]:
        return None if rng.random() < loss else rtt

    return probe
