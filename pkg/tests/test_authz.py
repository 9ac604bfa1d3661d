import json
import random

import pytest
from hypothesis import given, strategies as st

from gemombus import crypto
from gemombus.authz import (
    EMPTY_POLICY,
    Authorizer,
    AuthzRule,
    CompositeKey,
    Policy,
    UnknownActor,
    evaluate,
    policy_from_json,
    policy_to_json,
    translate_groups,
)
from gemombus.kmf import sign_envelope
from gemombus.wire import POLICY_EVOLUTION_PREFIX, Envelope, new_id
from test_topics import regex_match

DIRECTORY = {"alice": ["ops"], "bob": ["dev", "ops"], "carol": ["dev"], "dave": []}
TOPICS = ["app/a", "app/b", "app/a/x", "sys/log", "other"]
PATTERNS = ["#", "app/#", "app/*", "app/a", "sys/#", "*/log", "other"]
OPS = ["publish", "subscribe", "create", "delete"]


def window_minutes(w):
    start, end = w
    if start < end:
        return set(range(start, end))
    return set(range(start, 1440)) | set(range(0, end))


def oracle(ck, op, topic, policy, floor, directory):
    """Enumerate every predicate of every rule independently."""
    if ck.actor not in directory:
        return ("deny", None, "unknown-actor")
    groups = set(directory[ck.actor])
    minute = int(ck.time // 60) % 1440
    first_failure = None
    for i, r in enumerate(policy.rules):
        applies = [op in r.operations, bool(groups & r.groups), regex_match(r.pattern, topic)]
        if not all(applies):
            continue
        checks = [
            ("strength-range", r.strength_range[0] <= ck.auth_strength <= r.strength_range[1]),
            ("strength-floor", ck.auth_strength >= floor),
            ("time-window", not r.time_windows or any(minute in window_minutes(w) for w in r.time_windows)),
        ]
        for key in sorted(r.context_bounds):
            section, name = key.split(".")
            v = ck.context.get(section, {}).get(name)
            b = r.context_bounds[key]
            ok = v is not None and (b[0] <= v <= b[1] if isinstance(b, tuple) else v == b)
            checks.append((f"context:{key}", ok))
        for dim in sorted(r.profile_bounds):
            v = ck.security_profile.get(dim)
            lo, hi = r.profile_bounds[dim]
            checks.append((f"profile:{dim}", v is not None and lo <= v <= hi))
        failed = [name for name, ok in checks if not ok]
        if not failed:
            return ("allow", i, "rule")
        if first_failure is None:
            first_failure = failed[0]
    return ("deny", None, first_failure or "no-matching-rule")


def random_rule(rng):
    lo = rng.randint(0, 5)
    windows = ()
    if rng.random() < 0.4:
        a, b = rng.randrange(1440), rng.randrange(1440)
        if a != b:
            windows = ((a, b),)
    context = {}
    if rng.random() < 0.3:
        context["env.load"] = (rng.randint(0, 5), rng.randint(5, 10))
    if rng.random() < 0.3:
        context["access.network"] = rng.choice(["lan", "wan"])
    profile = {}
    if rng.random() < 0.3:
        a = rng.random()
        profile["threat"] = (min(a, 0.5), max(a, 0.5))
    return AuthzRule(
        groups=frozenset(rng.sample(["ops", "dev", "guests"], rng.randint(1, 2))),
        pattern=rng.choice(PATTERNS),
        operations=frozenset(rng.sample(OPS, rng.randint(1, 3))),
        strength_range=(lo, rng.randint(lo, 5)),
        time_windows=windows,
        context_bounds=context,
        profile_bounds=profile,
    )


def random_case(rng):
    policy = Policy(1, tuple(random_rule(rng) for _ in range(rng.randint(0, 5))))
    ctx = {}
    if rng.random() < 0.7:
        ctx["env"] = {"load": rng.randint(0, 10)}
    if rng.random() < 0.7:
        ctx["access"] = {"network": rng.choice(["lan", "wan"])}
    profile = {"threat": rng.random()} if rng.random() < 0.7 else {}
    ck = CompositeKey(rng.choice(list(DIRECTORY) + ["mallory"]), rng.randint(0, 5), ctx, rng.uniform(0, 2 * 86400), profile)
    return ck, rng.choice(OPS), rng.choice(TOPICS), policy, rng.randint(0, 5)


def test_matches_oracle_on_random_cases():
    rng = random.Random(11)
    for _ in range(2000):
        ck, op, topic, policy, floor = random_case(rng)
        d = evaluate(ck, op, topic, policy, floor, DIRECTORY)
        assert (d.outcome, d.matched_rule, d.reason) == oracle(ck, op, topic, policy, floor, DIRECTORY)


def test_empty_policy_denies():
    d = evaluate(CompositeKey("alice", 5), "publish", "app/a", EMPTY_POLICY, 0, DIRECTORY)
    assert not d.allowed and d.reason == "no-matching-rule"


def test_unknown_actor():
    with pytest.raises(UnknownActor):
        translate_groups("mallory", 1, DIRECTORY)
    assert evaluate(CompositeKey("mallory", 5), "publish", "app/a", Policy(1, ()), 0, DIRECTORY).reason == "unknown-actor"


def test_translate_groups_one_pair_per_membership():
    assert translate_groups("bob", 3, DIRECTORY) == [("dev", 3), ("ops", 3)]


def test_time_window_wraps_midnight():
    rule = AuthzRule(frozenset({"ops"}), "#", frozenset({"publish"}), time_windows=((22 * 60, 6 * 60),))
    p = Policy(1, (rule,))
    at = lambda h, m=0: (h * 60 + m) * 60.0
    assert evaluate(CompositeKey("alice", 3, time=at(23)), "publish", "x", p, 0, DIRECTORY).allowed
    assert evaluate(CompositeKey("alice", 3, time=at(5, 59)), "publish", "x", p, 0, DIRECTORY).allowed
    d = evaluate(CompositeKey("alice", 3, time=at(6)), "publish", "x", p, 0, DIRECTORY)
    assert d.reason == "time-window"


def test_floor_denies_weak_authentication():
    p = Policy(1, (AuthzRule(frozenset({"ops"}), "#", frozenset({"publish"})),))
    az = Authorizer(DIRECTORY)
    az.install(p)
    ck = CompositeKey("alice", 2)
    assert az.evaluate(ck, "publish", "app/a").allowed
    az.set_floor(3)
    assert az.evaluate(ck, "publish", "app/a").reason == "strength-floor"
    with pytest.raises(ValueError):
        az.set_floor(6)


def test_longest_prefix_policy_governs():
    az = Authorizer(DIRECTORY)
    allow_all = Policy(1, (AuthzRule(frozenset({"ops"}), "#", frozenset(OPS)),))
    az.install(allow_all)
    az.install(Policy(1, ()), prefix="app/secret")
    ck = CompositeKey("alice", 3)
    assert az.evaluate(ck, "publish", "app/public").allowed
    assert not az.evaluate(ck, "publish", "app/secret/x").allowed
    assert az.evaluate(ck, "publish", "app/secretive").allowed


@given(st.integers(0, 5), st.integers(0, 5))
def test_json_round_trip(lo, width):
    rule = AuthzRule(frozenset({"ops", "dev"}), "app/#", frozenset({"publish"}), (min(lo, 5), min(lo + width, 5)),
                     ((60, 120),), {"env.load": (0, 3), "access.network": "lan"}, {"threat": (0.0, 0.5)})
    p = Policy(3, (rule,))
    assert policy_from_json(json.dumps(policy_to_json(p))) == p


def test_composite_key_validation():
    with pytest.raises(ValueError):
        CompositeKey("a", 6)
    with pytest.raises(ValueError):
        CompositeKey("a", 1, security_profile={"threat": 1.5})
    with pytest.raises(ValueError):
        AuthzRule(frozenset(), "#", frozenset({"fly"}))


def policy_envelope(owner_key, owner, version, prefix="app"):
    doc = {"version": version, "rules": [{"groups": ["ops"], "pattern": "app/#", "operations": ["publish"]}]}
    e = Envelope(new_id(), POLICY_EVOLUTION_PREFIX + prefix, owner, 0, payload=json.dumps(doc).encode())
    return sign_envelope(e, owner_key)


def test_policy_evolution_requires_owner_signature_and_newer_version():
    owner = crypto.generate_keypair()
    az = Authorizer(DIRECTORY, policy_owners={"app": crypto.public_bytes(owner)})
    assert az.apply_policy_evolution(policy_envelope(owner, "owner", 2)).version == 2
    assert az.evaluate(CompositeKey("alice", 1), "publish", "app/x").allowed
    # replayed or older versions are ignored
    assert az.apply_policy_evolution(policy_envelope(owner, "owner", 2)) is None
    # a forged update changes nothing
    forged = policy_envelope(crypto.generate_keypair(), "owner", 9)
    assert az.apply_policy_evolution(forged) is None
    assert az.rejected_updates >= 1
    assert az.policy_for("app/x").version == 2
