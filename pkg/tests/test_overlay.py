import random

import pytest

from gemombus.broker import GroupInfo, RoutingTable
from gemombus.overlay import (
    DEAD,
    SUSPECT,
    GNode,
    GroupUnavailable,
    OverlayManager,
    QoSSample,
    ReconfigThresholds,
    decide_reconfiguration,
    lossy_probe,
    loopback_probe,
)


class Clock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


def manager(nodes=("b1", "b2", "b3"), rf=3, **kw):
    clock = Clock()
    promoted = []
    m = OverlayManager(replication_factor=rf, clock=clock, promote=lambda n, g, term: promoted.append((n, g, term)), **kw)
    for n in nodes:
        m.add_node(GNode(n))
    return m, clock, promoted


def test_first_node_leads_and_others_mirror():
    m, _, promoted = manager()
    g = m.table.get("default")
    assert (g.primary, g.mirrors) == ("b1", ("b2", "b3"))
    assert promoted == [("b1", "default", 1)]


def test_failure_detection_and_failover_to_most_caught_up_mirror():
    m, clock, promoted = manager()
    m.heartbeat("b2", 0.0, {"default": 40})
    m.heartbeat("b3", 0.0, {"default": 42})
    clock.t = 6.0
    for n in ("b2", "b3"):
        m.heartbeat(n)
    assert m.detect_failure() == []
    assert m.nodes["b1"].status == SUSPECT
    clock.t = 15.0
    m.heartbeat("b2")
    m.heartbeat("b3")
    assert m.detect_failure() == ["b1"]
    assert m.nodes["b1"].status == DEAD
    g = m.table.get("default")
    assert (g.primary, g.mirrors) == ("b3", ("b2",))
    assert promoted[-1][0] == "b3"
    assert promoted[-1][2] > promoted[0][2]  # a new term
    assert m.dead_primaries() == ()


def test_tie_on_seq_goes_to_lowest_id():
    m, _, _ = manager(nodes=("b1", "b3", "b2"))
    assert m.failover("default").primary == "b2"


def test_suspect_node_recovers_on_heartbeat():
    m, clock, _ = manager()
    clock.t = 6.0
    m.detect_failure()
    m.heartbeat("b1")
    assert m.nodes["b1"].status == "alive"


def test_group_parks_without_mirrors():
    m, clock, _ = manager(nodes=("b1",), rf=1)
    with pytest.raises(GroupUnavailable):
        m.failover("default")
    assert m.table.get("default").parked
    assert m.health() == 0.0


def test_dead_nodes_ignore_heartbeats():
    m, clock, _ = manager()
    clock.t = 20.0
    m.heartbeat("b2")
    m.heartbeat("b3")
    m.detect_failure()
    m.heartbeat("b1")
    assert m.nodes["b1"].status == DEAD
    assert m.health() == pytest.approx(2 / 3)


def test_timeouts_validated():
    with pytest.raises(ValueError):
        OverlayManager(suspect_timeout=5, dead_timeout=5)
    with pytest.raises(ValueError):
        OverlayManager(replication_factor=0)


def table(primary="b1", mirrors=("b2", "b3")):
    return RoutingTable(1, (GroupInfo("g", ("#",), primary, mirrors),))


def sample(src, dst, rtt=10.0, loss=0.0, tput=100.0, at=0.0):
    return QoSSample(src, dst, rtt, loss, tput, at)


def test_reconfiguration_rules():
    th = ReconfigThresholds()
    assert decide_reconfiguration([sample("b1", "b2")], th, table()) == []
    lossy = decide_reconfiguration([sample("b1", "b2", loss=0.3)], th, table())
    assert [(a.kind, a.group) for a in lossy] == [("add-mirror", "g")]
    slow = [sample("b1", "b2", rtt=500), sample("b3", "x", rtt=5), sample("b2", "x", rtt=50)]
    moves = [(a.kind, a.node) for a in decide_reconfiguration(slow, th, table())]
    assert ("move-primary", "b3") in moves
    skew = [sample("b1", "b2", tput=1000), sample("b2", "b3", tput=10), sample("b3", "b1", tput=10)]
    assert ("rebalance", "b1") in [(a.kind, a.node) for a in decide_reconfiguration(skew, th, table())]


def test_reconfiguration_is_order_independent():
    th = ReconfigThresholds(smoothing=0.5)
    ss = [sample("b1", "b2", rtt=r, loss=l, at=float(i)) for i, (r, l) in enumerate([(10, 0), (400, 0.2), (300, 0.0)])]
    shuffled = list(ss)
    random.Random(3).shuffle(shuffled)
    assert decide_reconfiguration(ss, th, table()) == decide_reconfiguration(shuffled, th, table())


def test_qos_measurement():
    m, _, _ = manager()
    metrics = []
    m.record_metric = lambda metric, value, source: metrics.append(metric)
    s = m.measure_qos("b1", "b2", lossy_probe(0.5, 0.01, random.Random(1)), n_probes=100)
    assert 0.3 < s.loss_rate < 0.7
    assert s.rtt_ms == pytest.approx(10.0)
    assert metrics == ["qos.rtt", "qos.loss", "qos.throughput"]
    assert m.measure_qos("b1", "b2", loopback_probe, n_probes=3).loss_rate == 0.0
    assert m.measure_qos("b1", "nobody", loopback_probe).loss_rate == 1.0
    with pytest.raises(ValueError):
        QoSSample("a", "b", 1.0, 1.5, 0.0, 0.0)
