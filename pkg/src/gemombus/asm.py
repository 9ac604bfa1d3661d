"""The adaptive security manager's global control loop.

Each step senses the environment, folds it into a smoothed threat level,
refreshes the system state, picks actions from a rule table with
hysteresis, and dispatches them to the components.

Rule table (defaults):

    threat >= 0.7 while armed    RotateKeys(256), RaiseFloor(+1), TightenThresholds
    threat >= 0.4 and bits < 192 RotateKeys(192)
    threat <= 0.6 while disarmed re-arm the 0.7 trigger (no action)
    threat <= 0.3 and escalated  RotateKeys(128), LowerFloor(baseline), RelaxThresholds
    delivery goal violated with a dead primary: TriggerFailover(group)
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

log = logging.getLogger(__name__)

ACTION_KINDS = (
    "RotateKeys",
    "RaiseFloor",
    "LowerFloor",
    "TriggerFailover",
    "TightenThresholds",
    "RelaxThresholds",
    "RevokeAllKeys",
)


@dataclass(frozen=True)
class AsmParams:
    trigger_hi: float = 0.7
    trigger_mid: float = 0.4
    release_hi: float = 0.6
    release_mid: float = 0.3
    lambda_t: float = 0.3
    anomaly_weight: float = 0.7
    suspicion_weight: float = 0.3
    baseline_floor: int = 0
    staleness_s: float = 5.0
    period_s: float = 1.0

    @classmethod
    def from_config(cls, cfg) -> "AsmParams":
        return cls(
            trigger_hi=cfg["asm.trigger_hi"],
            trigger_mid=cfg["asm.trigger_mid"],
            release_hi=cfg["asm.release_hi"],
            release_mid=cfg["asm.release_mid"],
            lambda_t=cfg["asm.lambda_t"],
            baseline_floor=cfg["asm.baseline_floor"],
            staleness_s=cfg["asm.staleness_s"],
            period_s=cfg["asm.period_ms"] / 1000.0,
        )


@dataclass(frozen=True)
class EnvInfluence:
    anomaly_scores: Mapping[str, float] = field(default_factory=dict)
    fault_events: tuple = ()
    qos: Mapping[str, float] = field(default_factory=dict)
    suspicion: Mapping[str, float] = field(default_factory=dict)
    offline_reports: tuple = ()
    stale: tuple = ()

    def __post_init__(self):
        for name, m in (("anomaly", self.anomaly_scores), ("suspicion", self.suspicion)):
            for k, v in m.items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name} score for {k} out of [0,1]: {v}")


@dataclass(frozen=True)
class SystemState:
    threat: float = 0.0
    key_bits: int = 128
    auth_floor: int = 0
    overlay_health: float = 1.0
    delivery_ratio: float = 1.0
    root_trustworthiness: float = 1.0
    armed: bool = True
    thresholds_profile: str = "normal"
    dead_primaries: tuple = ()


@dataclass(frozen=True)
class Goal:
    name: str
    attr: str
    op: str  # "<=" or ">="
    bound: float

    def holds(self, s: SystemState) -> bool:
        v = getattr(s, self.attr)
        return v <= self.bound if self.op == "<=" else v >= self.bound


@dataclass(frozen=True)
class Goals:
    constraints: tuple = (
        Goal("threat", "threat", "<=", 0.7),
        Goal("delivery", "delivery_ratio", ">=", 0.995),
        Goal("trustworthiness", "root_trustworthiness", ">=", 0.5),
    )

    def violations(self, s: SystemState) -> list[str]:
        return [g.name for g in self.constraints if not g.holds(s)]


@dataclass(frozen=True)
class ControlVector:
    key_bits: int = 128
    auth_floor: int = 0
    monitoring_lambda: float = 0.1
    thresholds_profile: str = "normal"
    policy_version_min: int = 0


@dataclass(frozen=True)
class AdaptationAction:
    kind: str
    arg: object = None
    issued_at: float = 0.0
    cause: str = ""

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise ValueError(f"unknown action kind {self.kind}")
        if not self.cause:
            raise ValueError("every action needs a cause")

    def label(self) -> str:
        return self.kind if self.arg is None else f"{self.kind}({self.arg})"


@dataclass
class StepReport:
    step: int
    ts: float
    x: EnvInfluence
    s: SystemState
    actions: list
    violations: list
    latency_s: float = 0.0

    def audit_line(self) -> dict:
        return {
            "ts": self.ts,
            "step": self.step,
            "threat": self.s.threat,
            "actions": [a.label() for a in self.actions],
            "cause": "; ".join(a.cause for a in self.actions),
        }


# sensing


class SensorHub:
    """Where sensors drop observations between control steps.

    Anomaly and suspicion channels keep their latest value with a timestamp;
    events and reports queue up until the next ``sense``.
    """

    def __init__(self):
        self.anomaly: dict[str, tuple] = {}
        self.suspicion: dict[str, tuple] = {}
        self.qos: dict[str, tuple] = {}
        self.faults: list = []
        self.reports: list = []
        self.stale_seen: set = set()

    def set_anomaly(self, metric_id: str, score: float, at: float) -> None:
        self.anomaly[metric_id] = (score, at)

    def set_suspicion(self, principal: str, value: float, at: float) -> None:
        self.suspicion[principal] = (value, at)

    def set_qos(self, name: str, value: float, at: float) -> None:
        self.qos[name] = (value, at)

    def push_fault(self, event) -> None:
        self.faults.append(event)

    def push_offline_report(self, report) -> None:
        self.reports.append(report)


def sense(hub: SensorHub, now: float, staleness_s: float = 5.0) -> EnvInfluence:
    """Snapshot every channel; silent channels count as neutral."""
    stale = []

    def fresh(channel: str, m: dict) -> dict:
        out = {}
        for k, (v, at) in sorted(m.items()):
            if now - at > staleness_s:
                stale.append(f"{channel}:{k}")
            else:
                out[k] = v
        return out

    x = EnvInfluence(
        anomaly_scores=fresh("anomaly", hub.anomaly),
        fault_events=tuple(hub.faults),
        qos=fresh("qos", hub.qos),
        suspicion=fresh("suspicion", hub.suspicion),
        offline_reports=tuple(hub.reports),
        stale=tuple(stale),
    )
    for ch in stale:
        if ch not in hub.stale_seen:
            log.warning("sensor channel %s is stale; treating as neutral", ch)
    hub.stale_seen = set(stale)
    hub.faults = []
    hub.reports = []
    return x


def aggregate_influence(x: EnvInfluence, anomaly_weight: float = 0.7, suspicion_weight: float = 0.3) -> float:
    """Worst anomaly, lifted by mean suspicion when suspicion runs higher."""
    a = max(x.anomaly_scores.values(), default=0.0)
    s = sum(x.suspicion.values()) / len(x.suspicion) if x.suspicion else 0.0
    return max(a, anomaly_weight * a + suspicion_weight * s)


def update_threat(prev_threat: float, x: EnvInfluence, lambda_t: float = 0.3, anomaly_weight: float = 0.7,
                  suspicion_weight: float = 0.3) -> float:
    agg = aggregate_influence(x, anomaly_weight, suspicion_weight)
    return min(max(lambda_t * agg + (1 - lambda_t) * prev_threat, 0.0), 1.0)


def decide(s: SystemState, z: Goals, p: AsmParams = AsmParams(), now: float = 0.0) -> list[AdaptationAction]:
    actions = []
    t = s.threat
    if t >= p.trigger_hi and s.armed:
        cause = f"threat {t:.3f} >= {p.trigger_hi}"
        actions.append(AdaptationAction("RotateKeys", 256, now, cause))
        actions.append(AdaptationAction("RaiseFloor", min(s.auth_floor + 1, 5), now, cause))
        if s.thresholds_profile != "strict":
            actions.append(AdaptationAction("TightenThresholds", None, now, cause))
    elif t >= p.trigger_mid and s.key_bits < 192:
        actions.append(AdaptationAction("RotateKeys", 192, now, f"threat {t:.3f} >= {p.trigger_mid}"))
    elif t <= p.release_mid and (s.key_bits > 128 or s.auth_floor > p.baseline_floor or s.thresholds_profile == "strict"):
        cause = f"threat {t:.3f} <= {p.release_mid}"
        if s.key_bits > 128:
            actions.append(AdaptationAction("RotateKeys", 128, now, cause))
        if s.auth_floor > p.baseline_floor:
            actions.append(AdaptationAction("LowerFloor", p.baseline_floor, now, cause))
        if s.thresholds_profile == "strict":
            actions.append(AdaptationAction("RelaxThresholds", None, now, cause))
    if "delivery" in z.violations(s):
        for g in s.dead_primaries:
            actions.append(AdaptationAction("TriggerFailover", g, now, f"delivery {s.delivery_ratio:.4f} with dead primary"))
    return actions


def apply_to_state(s: SystemState, actions: Sequence[AdaptationAction], p: AsmParams) -> SystemState:
    """State bookkeeping implied by a set of applied actions, plus re-arming."""
    for a in actions:
        if a.kind == "RotateKeys":
            s = replace(s, key_bits=a.arg)
            if a.arg == 256:
                s = replace(s, armed=False)
        elif a.kind in ("RaiseFloor", "LowerFloor"):
            s = replace(s, auth_floor=a.arg)
        elif a.kind == "TightenThresholds":
            s = replace(s, thresholds_profile="strict")
        elif a.kind == "RelaxThresholds":
            s = replace(s, thresholds_profile="normal")
    if not s.armed and s.threat <= p.release_hi:
        s = replace(s, armed=True)
    return s


class Actuators:
    """Bindings from action kinds to component calls.  Override what exists."""

    def rotate_keys(self, bits: int) -> None:
        raise NotImplementedError

    def revoke_all(self) -> None:
        raise NotImplementedError

    def set_floor(self, n: int) -> None:
        raise NotImplementedError

    def failover(self, group: str) -> None:
        raise NotImplementedError

    def thresholds_profile(self, profile: str) -> None:
        raise NotImplementedError


def _dispatch(act: Actuators, a: AdaptationAction) -> None:
    if a.kind == "RotateKeys":
        act.rotate_keys(a.arg)
    elif a.kind == "RevokeAllKeys":
        act.revoke_all()
    elif a.kind in ("RaiseFloor", "LowerFloor"):
        act.set_floor(a.arg)
    elif a.kind == "TriggerFailover":
        act.failover(a.arg)
    elif a.kind == "TightenThresholds":
        act.thresholds_profile("strict")
    elif a.kind == "RelaxThresholds":
        act.thresholds_profile("normal")


class AdaptationManager:
    def __init__(
        self,
        hub: SensorHub,
        actuators: Actuators,
        state_probe: Callable[[], Mapping[str, object]] = dict,
        params: AsmParams = AsmParams(),
        goals: Goals = Goals(),
        clock: Callable[[], float] = time.monotonic,
        audit: Optional[Callable[..., None]] = None,
        record_metric: Callable[[str, float], None] = lambda metric, value: None,
        trail_path: Optional[str] = None,
    ):
        self.hub = hub
        self.actuators = actuators
        self.state_probe = state_probe
        self.params = params
        self.goals = goals
        self.clock = clock
        self.audit = audit or (lambda *a, **k: None)
        self.record_metric = record_metric
        self.state = SystemState(auth_floor=params.baseline_floor)
        self.reports: list[StepReport] = []
        self.trail: list[dict] = []
        self.failed_dispatches: list[AdaptationAction] = []
        self._trail_fh = open(trail_path, "a", encoding="utf-8") if trail_path else None

    def act(self, actions: Sequence[AdaptationAction]) -> list[AdaptationAction]:
        """Dispatch in order; returns the actions that took effect."""
        applied = []
        for a in actions:
            for attempt in (1, 2):
                try:
                    _dispatch(self.actuators, a)
                except Exception as exc:  # noqa: BLE001 - any actuator failure is retried once
                    log.warning("dispatch of %s failed (attempt %d): %s", a.label(), attempt, exc)
                    if attempt == 2:
                        self.failed_dispatches.append(a)
                        self.hub.push_fault(("dispatch-failed", a.label()))
                    continue
                applied.append(a)
                self.record_metric("asm.action", 1.0)
                self.audit("adapt", "asm", event="action", action=a.label(), cause=a.cause)
                break
        return applied

    def control_step(self, now: Optional[float] = None) -> StepReport:
        t0 = time.perf_counter()
        now = self.clock() if now is None else now
        p = self.params
        x = sense(self.hub, now, p.staleness_s)
        threat = update_threat(self.state.threat, x, p.lambda_t, p.anomaly_weight, p.suspicion_weight)
        probed = dict(self.state_probe())
        s = replace(self.state, threat=threat, **probed)
        actions = decide(s, self.goals, p, now)
        applied = self.act(actions)
        self.state = apply_to_state(s, applied, p)
        report = StepReport(len(self.reports), now, x, self.state, applied, self.goals.violations(self.state),
                            time.perf_counter() - t0)
        self.reports.append(report)
        line = report.audit_line()
        self.trail.append(line)
        if self._trail_fh is not None:
            self._trail_fh.write(json.dumps(line, sort_keys=True) + "\n")
            self._trail_fh.flush()
        return report

    def control_vector(self, monitoring_lambda: float = 0.1) -> ControlVector:
        s = self.state
        return ControlVector(s.key_bits, s.auth_floor, monitoring_lambda, s.thresholds_profile)
