"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import dataclasses
import hashlib
import itertools
import os
import random
import statistics
import subprocess
import sys
import time
from importlib import resources

import numpy as np
import pytest

from gemombus import crypto
from gemombus.authz import evaluate
from gemombus.kmf import Kmf, key_epoch
from gemombus.monitoring import (
    EwmaState,
    NaiveBayesBottleneck,
    aggregate_levels,
    default_bmc_tree,
    ewma_update,
    nb_classify,
)
from gemombus.net import measure_throughput
from gemombus.sim import run_scenario
from gemombus.trust import TrustRecord, TrustValues, aggregate_trust, confidence, trust, update_evidence, values

from conftest import Bus
from test_authz import DIRECTORY, oracle, random_case
from test_monitoring import CELLS, brute_force_posterior, ewma_closed_form
from test_trust import confidence_by_moments, seven_node_tree

SCENARIOS = resources.files("gemombus") / "scenarios"
SIM_CORPUS = ["failover_100k", "flood", "selective_drop_pseudonyms", "selective_drop_plain", "credential_misuse",
              "mixed_faults", "empty"]


def report(capsys, n, name, ok, detail, note=""):
    verdict = ("PASS-WITH-NOTE" if note else "PASS") if ok else "FAIL"
    with capsys.disabled():
        print(f"\nCRITERION {n} {name}: {verdict} ({detail}){' ' + note if note else ''}")


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = {}
    for name in SIM_CORPUS:
        d = tmp_path_factory.mktemp(name)
        t0 = time.perf_counter()
        r = run_scenario(str(SCENARIOS / f"{name}.json"), str(d))
        out[name] = (r, time.perf_counter() - t0, d)
    return out


def test_1_failover_delivery(corpus, capsys):
    r, wall, _ = corpus["failover_100k"]
    ok = not r.failed and r.published == 100_000 and r.delivery_ratio >= 0.995 and wall <= 120
    report(capsys, 1, "failover delivery", ok,
           f"delivery_ratio {r.delivery_ratio:.6f} >= 0.995 over {r.published} messages, runtime {wall:.1f}s <= 120s")
    assert ok, r.error


def test_2_throughput(capsys):
    runs = [measure_throughput(messages=20_000, payload_bytes=512) for _ in range(3)]
    rates = [r["throughput_mps"] for r in runs]
    median = statistics.median(rates)
    m = runs[0]["machine"]
    spec = f"{m['cpus']} cpu {m['machine']} {m['processor']}, python {m['python']}"
    detail = f"median {median:.0f} msg/s of {[round(x) for x in rates]}, 512-byte encrypted payloads, {spec}"
    note = "" if median >= 5000 else "(below 5000 msg/s target; >= 2500 msg/s accepted on constrained hardware)"
    ok = median >= 2500
    report(capsys, 2, "throughput", ok, detail, note)
    assert ok


def test_3_adaptive_response(corpus, capsys):
    r, _, _ = corpus["flood"]
    onset = 20.0
    steps = [s for s in r.steps if s["ts"] >= onset]
    crossing = next((i + 1 for i, s in enumerate(steps) if s["threat"] >= 0.7), None)
    labels = [(s["ts"], s["threat"], a) for s in r.steps for a in s["actions"]]
    escalations = [a for _, _, a in labels if a in ("RotateKeys(256)",) or a.startswith("RaiseFloor")]
    downgrades = [(ts, t, a) for ts, t, a in labels if a == "RotateKeys(128)" or a.startswith("LowerFloor")]
    first_escalation = min((ts for ts, _, a in labels if a == "RotateKeys(256)"), default=None)
    late = [d for d in downgrades if first_escalation is not None and d[0] > first_escalation]
    ok = (
        crossing is not None and crossing <= 5
        and "RotateKeys(256)" in escalations and any(a.startswith("RaiseFloor") for a in escalations)
        and bool(late) and all(t < 0.3 for _, t, _ in late)
    )
    detail = (f"threat >= 0.7 at step {crossing} after onset (<= 5); escalation {sorted(set(escalations))}; "
              f"downgrades at threat {[round(t, 3) for _, t, _ in late]} (< 0.3)")
    report(capsys, 3, "adaptive response", ok, detail)
    assert ok


def test_4_key_lifecycle(corpus, capsys):
    bus = Bus()
    topics = ["app/a", "app/b", "app/c"]
    for t in topics:
        bus.secure(t, "owner", "group:clients")
    alice, bob = bus.client("alice"), bus.client("bob")
    got = []
    bob.on_message = lambda env, payload: got.append(env)
    bob.subscribe("app/#")
    bus.run(0.5)
    for t in topics:
        alice.publish(t, b"before")
    bus.run(1.0)
    old = {t: alice.current_key[t] for t in topics}
    notice = bus.kmf.revoke_all(256)
    for b in bus.brokers.values():
        b.apply_notice(notice)
    for t in topics:
        alice.publish(t, b"after")
    bus.run(2.0)
    rejected = alice.stats["nack.stale-key"]
    all_revoked = all(bus.kmf.key_status(k) == "revoked" for k in old.values())
    fresh = {t: alice.current_key[t] for t in topics}
    fresh_ok = all(fresh[t] != old[t] and key_epoch(fresh[t]) > key_epoch(old[t]) for t in topics)
    after = [e for e in got if e.enc and e.enc.key_id in set(fresh.values())]
    leaks = {name: r.key_leaks for name, (r, _, _) in corpus.items()}
    frames = sum(r.frames for r, _, _ in corpus.values())
    no_leaks = not any(leaks.values())
    ok = all_revoked and rejected == len(topics) and fresh_ok and len(after) == len(topics) and no_leaks
    report(capsys, 4, "key lifecycle", ok,
           f"{rejected}/{len(topics)} old-key publishes rejected, fresh key ids {fresh_ok}, "
           f"{sum(map(len, leaks.values()))} key-material hits in {frames} captured frames")
    assert ok


def mutate_field(tok, name, rng):
    v = getattr(tok, name)
    if isinstance(v, bytes):
        i = rng.randrange(len(v))
        return dataclasses.replace(tok, **{name: v[:i] + bytes([v[i] ^ (1 << rng.randrange(8))]) + v[i + 1:]})
    if isinstance(v, int):
        delta = rng.choice([-1, 1, rng.randint(2, 10_000)])
        nv = v + delta
        if name == "auth_strength":
            nv = (v + rng.randint(1, 5)) % 6
        return dataclasses.replace(tok, **{name: nv})
    if isinstance(v, tuple):
        return dataclasses.replace(tok, **{name: ("publish", "subscribe") if len(v) == 1 else (v[0],)})
    return dataclasses.replace(tok, **{name: v + rng.choice(["x", "/y", "#"]) if v != "#" else "a/#"})


def test_5_token_integrity(capsys):
    rng = random.Random(5)
    clock = [1_000_000.0]
    kmf = Kmf(clock=lambda: clock[0], rng=rng)
    names = [f"p{i}" for i in range(20)]
    for n in names:
        kmf.register_principal(n, crypto.public_bytes(crypto.generate_keypair()))
    fields = [f.name for f in dataclasses.fields(kmf.issue_token("p0", "#", ["publish"], 0, 1))]
    false_valid = checked = 0
    for i in range(1000):
        rights = rng.choice([["publish"], ["subscribe"], ["publish", "subscribe"]])
        tok = kmf.issue_token(rng.choice(names), rng.choice(["#", "app/#", f"app/{i}", "a/*/c"]), rights,
                              rng.randint(0, 5), rng.randint(1000, 10**9))
        assert kmf.verify_token(tok).valid
        for name in fields:
            bad = mutate_field(tok, name, rng)
            assert bad != tok
            checked += 1
            if kmf.verify_token(bad).valid:
                false_valid += 1
    ok = false_valid == 0 and checked == 1000 * len(fields)
    report(capsys, 5, "token integrity", ok, f"{false_valid} false-valid of {checked} single-field mutations")
    assert ok


def test_6_authorization_oracle(capsys):
    rng = random.Random(6)
    mismatches = 0
    allowed = 0
    for _ in range(10_000):
        ck, op, topic, policy, floor = random_case(rng)
        d = evaluate(ck, op, topic, policy, floor, DIRECTORY)
        allowed += d.allowed
        if (d.outcome, d.matched_rule, d.reason) != oracle(ck, op, topic, policy, floor, DIRECTORY):
            mismatches += 1
    ok = mismatches == 0
    report(capsys, 6, "authorization oracle equivalence", ok,
           f"{mismatches} mismatches in 10000 cases ({allowed} allowed)")
    assert ok


def test_7_trust_numerics(capsys):
    r = TrustRecord("x", 9, 3)
    exact = trust(r) == 0.75
    conf_err = abs(confidence(r) - confidence_by_moments(9, 3))
    rng = random.Random(7)
    violations = 0
    for _ in range(10_000):
        rec = TrustRecord("e", float(rng.randint(1, 1000)), float(rng.randint(1, 1000)))
        v = values(rec)
        if not all(0 <= x <= 1 for x in (v.trust, v.confidence, v.trustworthiness)):
            violations += 1
        if not trust(update_evidence(rec, "success")) > v.trust > trust(update_evidence(rec, "failure")):
            violations += 1
    leaves = {"A1": TrustValues(0.8, 0.5, 0.4), "A2": TrustValues(0.5, 0.9, 0.45),
              "B1": TrustValues(0.9, 0.7, 0.63), "B2": TrustValues(0.6, 0.4, 0.24)}
    root = aggregate_trust(seven_node_tree(), leaves)["root"]
    agg_err = max(abs(root.trust - 7 / 12), abs(root.confidence - 2 / 3), abs(root.trustworthiness - 1.115 / 3))
    ok = exact and conf_err <= 1e-9 and violations == 0 and agg_err <= 1e-12
    report(capsys, 7, "trust numerics", ok,
           f"trust(9,3)={trust(r)}, confidence error {conf_err:.1e} <= 1e-9, {violations} property violations "
           f"in 10000 records, 7-node aggregate error {agg_err:.1e} <= 1e-12")
    assert ok


def test_8_monitoring_numerics(capsys):
    rng = random.Random(8)
    xs = [rng.gauss(100, 15) for _ in range(200)]
    means, variances = ewma_closed_form(xs, 0.1)
    st = EwmaState("m", 0.1)
    ewma_err = 0.0
    for x, m, v in zip(xs, means, variances):
        st, _ = ewma_update(st, x)
        ewma_err = max(ewma_err, abs(st.mean - m) / max(1, abs(m)), abs(st.var - v) / max(1, v))
    nb_mismatch = nb_total = 0
    for size in range(1, 4):
        for rows in itertools.combinations_with_replacement(CELLS, size):
            X = np.array([[r[1], r[2]] for r in rows], dtype=float)
            model = NaiveBayesBottleneck(bin_edges=[[0.5], [0.5]]).fit(X, np.array([r[0] for r in rows]))
            for q in itertools.product((0, 1), (0, 1)):
                nb_total += 1
                nb_mismatch += nb_classify(model, q) != float(brute_force_posterior(rows, q))
    tree = default_bmc_tree()
    leaves = tree.leaves()
    monotone_fail = 0
    for _ in range(1000):
        for leaf in leaves:
            tree.set_level(leaf, rng.random())
        before = aggregate_levels(tree)
        leaf = rng.choice(leaves)
        tree.set_level(leaf, rng.uniform(tree.nodes[leaf].level, 1.0))
        after = aggregate_levels(tree)
        monotone_fail += any(after[n] < before[n] for n in before)
    ok = ewma_err <= 1e-9 and nb_mismatch == 0 and monotone_fail == 0
    report(capsys, 8, "monitoring numerics", ok,
           f"EWMA relative error {ewma_err:.1e} <= 1e-9, NB {nb_mismatch}/{nb_total} mismatches, "
           f"{monotone_fail}/1000 monotonicity failures")
    assert ok


DETERMINISM_SCRIPT = """
import sys
from gemombus.sim import run_scenario
run_scenario(sys.argv[1], sys.argv[2])
"""


def test_9_determinism(tmp_path, capsys):
    digests = {}
    for name in ("mixed_faults", "flood"):
        for hashseed in ("1", "99"):
            out = tmp_path / f"{name}-{hashseed}"
            env = dict(os.environ, PYTHONHASHSEED=hashseed)
            subprocess.run([sys.executable, "-c", DETERMINISM_SCRIPT, str(SCENARIOS / f"{name}.json"), str(out)],
                           check=True, env=env, capture_output=True, timeout=600)
            digests.setdefault(name, set()).add(hashlib.sha256((out / "report.json").read_bytes()).hexdigest())
    ok = all(len(d) == 1 for d in digests.values())
    report(capsys, 9, "determinism", ok,
           ", ".join(f"{n}: {len(d)} distinct report.json digest(s) across 2 runs" for n, d in digests.items()))
    assert ok


def test_10_pseudonym_defense(corpus, capsys):
    with_p = corpus["selective_drop_pseudonyms"][0].per_topic["app/t0"]["ratio"]
    without = corpus["selective_drop_plain"][0].per_topic["app/t0"]["ratio"]
    ok = with_p >= 0.99 and without <= 0.5
    report(capsys, 10, "pseudonym defense", ok,
           f"attacked topic delivery {with_p:.4f} with pseudonyms (>= 0.99), {without:.4f} without (<= 0.5)")
    assert ok
