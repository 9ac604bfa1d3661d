import json

import pytest
from hypothesis import given, strategies as st

from gemombus.asm import (
    Actuators,
    AdaptationAction,
    AdaptationManager,
    AsmParams,
    EnvInfluence,
    Goals,
    SensorHub,
    SystemState,
    aggregate_influence,
    decide,
    sense,
    update_threat,
)


class Recorder(Actuators):
    def __init__(self, fail=()):
        self.calls = []
        self.fail = set(fail)

    def _call(self, *c):
        if c[0] in self.fail:
            raise RuntimeError("actuator down")
        self.calls.append(c)

    def rotate_keys(self, bits):
        self._call("rotate", bits)

    def set_floor(self, n):
        self._call("floor", n)

    def failover(self, group):
        self._call("failover", group)

    def thresholds_profile(self, profile):
        self._call("profile", profile)


scores = st.dictionaries(st.text(max_size=3), st.floats(0, 1), max_size=4)


@given(scores, scores, st.floats(0, 1), st.floats(0.01, 1))
def test_threat_update_stays_in_unit_interval_and_smooths(anom, susp, prev, lam):
    x = EnvInfluence(anomaly_scores=anom, suspicion=susp)
    agg = aggregate_influence(x)
    t = update_threat(prev, x, lam)
    assert 0.0 <= t <= 1.0
    assert min(prev, agg) - 1e-12 <= t <= max(prev, agg) + 1e-12
    assert agg >= max(anom.values(), default=0.0)


def test_aggregation_example():
    x = EnvInfluence(anomaly_scores={"a": 0.5, "b": 0.2}, suspicion={"p": 1.0, "q": 0.0})
    assert aggregate_influence(x) == pytest.approx(0.7 * 0.5 + 0.3 * 0.5)
    x = EnvInfluence(anomaly_scores={"a": 0.9}, suspicion={"p": 0.0})
    assert aggregate_influence(x) == 0.9


def test_influence_validation():
    with pytest.raises(ValueError):
        EnvInfluence(anomaly_scores={"a": 1.5})
    with pytest.raises(ValueError):
        AdaptationAction("Explode", cause="x")
    with pytest.raises(ValueError):
        AdaptationAction("RotateKeys", 256)


def labels(actions):
    return [a.label() for a in actions]


def test_rule_table():
    z = Goals()
    assert labels(decide(SystemState(threat=0.75), z)) == ["RotateKeys(256)", "RaiseFloor(1)", "TightenThresholds"]
    assert labels(decide(SystemState(threat=0.75, armed=False, key_bits=256), z)) == []
    assert labels(decide(SystemState(threat=0.5), z)) == ["RotateKeys(192)"]
    assert labels(decide(SystemState(threat=0.5, key_bits=256), z)) == []
    escalated = SystemState(threat=0.25, key_bits=256, auth_floor=1, thresholds_profile="strict")
    assert labels(decide(escalated, z)) == ["RotateKeys(128)", "LowerFloor(0)", "RelaxThresholds"]
    assert labels(decide(SystemState(threat=0.1), z)) == []
    failing = SystemState(delivery_ratio=0.9, dead_primaries=("g1",))
    assert labels(decide(failing, z)) == ["TriggerFailover(g1)"]


def drive(manager, hub, series, now0=0.0):
    out = []
    for i, score in enumerate(series):
        t = now0 + i
        hub.set_anomaly("m", score, t)
        out.append(manager.control_step(t))
    return out


def test_hysteresis_holds_until_release_threshold():
    hub = SensorHub()
    act = Recorder()
    m = AdaptationManager(hub, act, params=AsmParams(lambda_t=1.0))
    reports = drive(m, hub, [0.8, 0.8, 0.65, 0.8, 0.5, 0.35, 0.31, 0.29])
    got = [(round(r.s.threat, 2), labels(r.actions)) for r in reports]
    assert got == [
        (0.8, ["RotateKeys(256)", "RaiseFloor(1)", "TightenThresholds"]),
        (0.8, []),  # disarmed
        (0.65, []),  # above the 0.6 re-arm level
        (0.8, []),
        (0.5, []),  # re-armed here, but 0.5 does not trigger
        (0.35, []),
        (0.31, []),
        (0.29, ["RotateKeys(128)", "LowerFloor(0)", "RelaxThresholds"]),
    ]
    assert act.calls[:3] == [("rotate", 256), ("floor", 1), ("profile", "strict")]


def test_failed_dispatch_is_retried_then_reported():
    hub = SensorHub()
    m = AdaptationManager(hub, Recorder(fail={"floor"}), params=AsmParams(lambda_t=1.0))
    (r,) = drive(m, hub, [0.9])
    assert labels(r.actions) == ["RotateKeys(256)", "TightenThresholds"]
    assert [a.kind for a in m.failed_dispatches] == ["RaiseFloor"]
    assert m.state.auth_floor == 0
    assert hub.faults == [("dispatch-failed", "RaiseFloor(1)")]


def test_stale_channels_are_neutral(caplog):
    hub = SensorHub()
    hub.set_anomaly("old", 1.0, 0.0)
    hub.set_anomaly("new", 0.2, 9.0)
    x = sense(hub, 10.0, staleness_s=5.0)
    assert x.anomaly_scores == {"new": 0.2}
    assert x.stale == ("anomaly:old",)
    sense(hub, 10.5, staleness_s=5.0)
    assert sum("stale" in r.message for r in caplog.records) == 1


def test_events_are_consumed_once():
    hub = SensorHub()
    hub.push_fault("crash")
    assert sense(hub, 0).fault_events == ("crash",)
    assert sense(hub, 0).fault_events == ()


def test_trail_file(tmp_path):
    hub = SensorHub()
    path = tmp_path / "trail.jsonl"
    m = AdaptationManager(hub, Recorder(), params=AsmParams(lambda_t=1.0), trail_path=str(path))
    drive(m, hub, [0.9, 0.1])
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert [l["step"] for l in lines] == [0, 1]
    assert lines[0]["cause"].startswith("threat 0.900")
    assert m.control_vector().key_bits == 128


def test_params_from_config():
    from gemombus.config import load_config

    p = AsmParams.from_config(load_config(environ={}, overrides={"asm.period_ms": 500}))
    assert p.period_s == 0.5 and p.trigger_hi == 0.7
