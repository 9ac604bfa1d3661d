"""Adaptive, fine-grained authorization over composite keys.

A request is authorized for the pair (actor, authentication strength)
plus context, time of day and a security profile.  Rules are tried in
order and the first rule whose every predicate holds wins; an empty policy
denies everything.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

from . import crypto
from .topics import match, validate_pattern
from .wire import POLICY_EVOLUTION_PREFIX, Envelope, canonical_bytes

log = logging.getLogger(__name__)

OPERATIONS = frozenset({"publish", "subscribe", "create", "delete"})
CONTEXT_SECTIONS = ("env", "access", "business")
DEFAULT_PROFILE_DIMS = ("threat", "qos_degradation")


class AuthzError(Exception):
    pass


class UnknownActor(AuthzError):
    pass


@dataclass(frozen=True)
class CompositeKey:
    actor: str
    auth_strength: int
    context: Mapping[str, Mapping[str, object]] = field(default_factory=dict)
    time: float = 0.0  # seconds since epoch, UTC
    security_profile: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.auth_strength <= 5:
            raise ValueError(f"auth_strength out of range: {self.auth_strength}")
        for dim, v in self.security_profile.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"profile dimension {dim} out of [0,1]: {v}")


Bound = Union[tuple, str, int, float]


@dataclass(frozen=True)
class AuthzRule:
    groups: frozenset
    pattern: str
    operations: frozenset
    strength_range: tuple = (0, 5)
    time_windows: tuple = ()  # ((start_min, end_min), ...), empty means any time
    context_bounds: Mapping[str, Bound] = field(default_factory=dict)
    profile_bounds: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        validate_pattern(self.pattern)
        lo, hi = self.strength_range
        if not 0 <= lo <= hi <= 5:
            raise ValueError(f"bad strength range {self.strength_range}")
        if not set(self.operations) <= OPERATIONS:
            raise ValueError(f"unknown operations {set(self.operations) - OPERATIONS}")
        for start, end in self.time_windows:
            if not (0 <= start < 1440 and 0 <= end <= 1440) or start == end:
                raise ValueError(f"bad time window {(start, end)}")
        for dim, (plo, phi) in self.profile_bounds.items():
            if not 0 <= plo <= phi <= 1:
                raise ValueError(f"bad profile bound for {dim}")


@dataclass(frozen=True)
class Policy:
    version: int = 0
    rules: tuple = ()
    default: str = "deny"


@dataclass(frozen=True)
class Decision:
    outcome: str
    matched_rule: Optional[int] = None
    reason: str = ""

    @property
    def allowed(self) -> bool:
        return self.outcome == "allow"


EMPTY_POLICY = Policy()


def _hhmm(s: str) -> int:
    h, m = s.split(":")
    h, m = int(h), int(m)
    if not (0 <= h <= 24 and 0 <= m < 60) or h * 60 + m > 1440:
        raise ValueError(f"bad time of day {s!r}")
    return h * 60 + m


def rule_from_json(obj: dict) -> AuthzRule:
    context = {}
    for k, v in (obj.get("context") or {}).items():
        context[k] = tuple(v) if isinstance(v, list) else v
    return AuthzRule(
        groups=frozenset(obj.get("groups", ())),
        pattern=obj["pattern"],
        operations=frozenset(obj.get("operations", ())),
        strength_range=tuple(obj.get("strength", (0, 5))),
        time_windows=tuple((_hhmm(a), _hhmm(b)) for a, b in obj.get("windows", ())),
        context_bounds=context,
        profile_bounds={k: tuple(v) for k, v in (obj.get("profile") or {}).items()},
    )


def policy_from_json(obj: Union[dict, str, bytes]) -> Policy:
    if not isinstance(obj, dict):
        obj = json.loads(obj)
    if obj.get("default", "deny") != "deny":
        raise ValueError("only default-deny policies are supported")
    return Policy(int(obj["version"]), tuple(rule_from_json(r) for r in obj.get("rules", ())))


def policy_to_json(p: Policy) -> dict:
    def hhmm(m):
        return f"{m // 60:02d}:{m % 60:02d}"

    return {
        "version": p.version,
        "default": p.default,
        "rules": [
            {
                "groups": sorted(r.groups),
                "pattern": r.pattern,
                "operations": sorted(r.operations),
                "strength": list(r.strength_range),
                "windows": [[hhmm(a), hhmm(b)] for a, b in r.time_windows],
                "context": {k: list(v) if isinstance(v, tuple) else v for k, v in r.context_bounds.items()},
                "profile": {k: list(v) for k, v in r.profile_bounds.items()},
            }
            for r in p.rules
        ],
    }


def translate_groups(actor: str, auth_strength: int, directory: Mapping[str, Sequence[str]]) -> list:
    """Expand an actor into one (group, strength) pair per membership."""
    if actor not in directory:
        raise UnknownActor(actor)
    return [(g, auth_strength) for g in directory[actor]]


def minute_of_day(ts: float) -> int:
    return int(ts // 60) % 1440


def in_window(minute: int, window: tuple) -> bool:
    start, end = window
    if start < end:
        return start <= minute < end
    return minute >= start or minute < end  # wraps midnight


def context_value(ck: CompositeKey, key: str):
    if "." in key:
        section, name = key.split(".", 1)
        if section in CONTEXT_SECTIONS:
            return ck.context.get(section, {}).get(name)
    for section in CONTEXT_SECTIONS:
        sec = ck.context.get(section, {})
        if key in sec:
            return sec[key]
    return None


def bound_holds(value, bound: Bound) -> bool:
    if value is None:
        return False
    if isinstance(bound, tuple):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False
        return bound[0] <= value <= bound[1]
    return value == bound


def _first_failure(rule: AuthzRule, ck: CompositeKey, floor: int) -> Optional[str]:
    lo, hi = rule.strength_range
    s = ck.auth_strength
    if not lo <= s <= hi:
        return "strength-range"
    if s < floor:
        return "strength-floor"
    if rule.time_windows:
        m = minute_of_day(ck.time)
        if not any(in_window(m, w) for w in rule.time_windows):
            return "time-window"
    for key in sorted(rule.context_bounds):
        if not bound_holds(context_value(ck, key), rule.context_bounds[key]):
            return f"context:{key}"
    for dim in sorted(rule.profile_bounds):
        v = ck.security_profile.get(dim)
        plo, phi = rule.profile_bounds[dim]
        if v is None or not plo <= v <= phi:
            return f"profile:{dim}"
    return None


def evaluate(
    ck: CompositeKey,
    op: str,
    topic: str,
    policy: Policy,
    floor: int,
    directory: Mapping[str, Sequence[str]],
) -> Decision:
    """Decide one request; pure in all of its arguments.

    A deny names the first failing predicate of the first rule that applies
    to (group, topic, op), or ``no-matching-rule`` if none applies.
    """
    try:
        groups = {g for g, _ in translate_groups(ck.actor, ck.auth_strength, directory)}
    except UnknownActor:
        return Decision("deny", None, "unknown-actor")
    reason = None
    for i, rule in enumerate(policy.rules):
        if op not in rule.operations or not (groups & rule.groups) or not match(rule.pattern, topic):
            continue
        failure = _first_failure(rule, ck, floor)
        if failure is None:
            return Decision("allow", i, "rule")
        if reason is None:
            reason = failure
    return Decision("deny", None, reason or "no-matching-rule")


class Authorizer:
    """Holds the live policy snapshots and the dynamic strength floor.

    Policies are keyed by topic prefix (``""`` is the global policy); the
    longest prefix covering a topic governs it.  Snapshots are swapped
    atomically so a concurrent ``evaluate`` sees either old or new.
    """

    def __init__(
        self,
        directory: Mapping[str, Sequence[str]],
        policy_owners: Optional[Mapping[str, bytes]] = None,
        audit: Optional[Callable[..., None]] = None,
        floor: int = 0,
    ):
        self.directory = directory
        self.policy_owners = dict(policy_owners or {})
        self.audit = audit or (lambda *a, **k: None)
        self._lock = threading.Lock()
        self._policies: dict[str, Policy] = {}
        self._floor = 0
        self.rejected_updates = 0
        self.set_floor(floor)

    @property
    def floor(self) -> int:
        return self._floor

    def set_floor(self, n: int) -> None:
        if not isinstance(n, int) or not 0 <= n <= 5:
            raise ValueError(f"floor must be an integer in 0..5, got {n!r}")
        old, self._floor = self._floor, n
        if old != n:
            self.audit("authz", "authorizer", event="set-floor", old=old, new=n)

    def install(self, policy: Policy, prefix: str = "") -> None:
        with self._lock:
            policies = dict(self._policies)
            policies[prefix] = policy
            self._policies = policies

    def policy_for(self, topic: str) -> Policy:
        policies = self._policies
        best, best_len = policies.get("", EMPTY_POLICY), -1
        for prefix, pol in policies.items():
            if prefix and (topic == prefix or topic.startswith(prefix + "/")) and len(prefix) > best_len:
                best, best_len = pol, len(prefix)
        return best

    def evaluate(self, ck: CompositeKey, op: str, topic: str) -> Decision:
        d = evaluate(ck, op, topic, self.policy_for(topic), self._floor, self.directory)
        if not d.allowed:
            self.audit("authz", ck.actor, event="deny", op=op, topic=topic, reason=d.reason)
        return d

    def apply_policy_evolution(self, e: Envelope) -> Optional[Policy]:
        """Install a signed policy update; returns the new policy or None if ignored."""
        if not e.topic.startswith(POLICY_EVOLUTION_PREFIX):
            raise AuthzError(f"not a policy topic: {e.topic}")
        prefix = e.topic[len(POLICY_EVOLUTION_PREFIX):]
        prefix = "" if prefix in ("", "#") else prefix
        owner_key = self.policy_owners.get(prefix)
        if (
            owner_key is None
            or e.sig is None
            or not crypto.verify(owner_key, e.sig.signature, canonical_bytes(e))
        ):
            self.rejected_updates += 1
            self.audit("authz", e.sender, event="policy-rejected", topic=e.topic, reason="bad-signature")
            return None
        policy = policy_from_json(e.payload)
        with self._lock:
            current = self._policies.get(prefix, EMPTY_POLICY)
            if policy.version <= current.version:
                log.info("ignoring stale policy version %d (current %d)", policy.version, current.version)
                return None
            policies = dict(self._policies)
            policies[prefix] = policy
            self._policies = policies
        self.audit("authz", e.sender, event="policy-installed", prefix=prefix, version=policy.version)
        return policy
