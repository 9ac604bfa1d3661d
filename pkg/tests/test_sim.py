import base64
import json

import pytest

from gemombus import sim as simmod
from gemombus.sim import FrameCapture, Ledger, Sim, run_scenario

SMALL = {
    "name": "small",
    "seed": 2,
    "duration_s": 8,
    "drain_s": 3,
    "topology": {"nodes": [{"id": "b1"}, {"id": "b2"}]},
    "workload": {"publishers": 2, "subscribers": 2, "topics": ["app/t0", "app/t1"], "rate_mps": 50, "duration_s": 8},
}


def test_scheduler_orders_by_time_then_insertion():
    s = Sim()
    out = []
    s.at(2.0, out.append, "b")
    s.at(1.0, out.append, "a")
    s.at(2.0, out.append, "c")
    s.every(1.5, lambda: out.append(round(s.now, 1)), start=0.5, until=3.5)
    s.run(5.0)
    assert out == [0.5, "a", "b", "c", 2.0, 3.5]
    assert s.now == 5.0


def test_ledger_counts_expected_and_acked():
    led = Ledger()
    led.published("m1", "t", "p", 0.0, ("s1", "s2"))
    led.published("m2", "t", "p", 0.5, ("s1",))
    led.received("m1", "s1")
    led.received("m1", "s1")  # duplicates count once
    led.received("m2", "s1")
    led.received("m9", "s1")  # unknown ids are ignored
    assert led.totals() == (3, 2)
    assert led.ratio() == pytest.approx(2 / 3)


def test_frame_capture_finds_key_material_in_any_encoding():
    secret = bytes(range(16))
    secrets = lambda: [("k1", secret)]
    cap = FrameCapture(secrets)
    cap.observe(b"harmless bytes")
    cap.close()
    assert cap.leaks == []
    for form in (secret, base64.b64encode(secret), secret.hex().encode()):
        c = FrameCapture(secrets)
        c.observe(b"xx" + form + b"yy")
        c.close()
        assert c.leaks == ["k1"], form


def test_frame_capture_sees_material_across_chunks():
    secret = bytes(range(32))
    c = FrameCapture(lambda: [("k1", secret)], chunk=100)
    c.observe(b"z" * 90 + secret[:16])
    c.observe(secret[16:] + b"z" * 100)
    c.close()
    assert c.leaks == ["k1"]


def test_clean_run_delivers_everything(tmp_path):
    r = run_scenario(SMALL, str(tmp_path))
    assert not r.failed, r.error
    assert r.delivery_ratio == 1.0
    assert r.published > 0 and r.expected_deliveries == 2 * r.published
    assert r.key_leaks == []
    names = {p.name for p in tmp_path.iterdir()}
    assert {"report.json", "threat.csv", "trust.csv", "delivery.csv", "messages.csv", "metrics.csv"} <= names
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["per_topic"]["app/t0"]["acked"] > 0


def test_same_seed_same_report_different_seed_differs(tmp_path):
    a = run_scenario(SMALL, str(tmp_path / "a"))
    b = run_scenario(SMALL, str(tmp_path / "b"))
    c = run_scenario(dict(SMALL, seed=3), str(tmp_path / "c"))
    ra, rb, rc = ((tmp_path / d / "report.json").read_bytes() for d in "abc")
    assert ra == rb
    assert ra != rc
    assert a.published == b.published


def test_link_drop_is_recovered_by_retries():
    doc = dict(SMALL, events=[{"at_s": 1, "kind": "link_drop", "rate": 0.05}])
    r = run_scenario(doc)
    assert not r.failed
    assert r.delivery_ratio > 0.99


def test_component_crash_fails_the_run(monkeypatch, tmp_path):
    def boom(self, *a, **k):
        raise RuntimeError("injected bug")

    monkeypatch.setattr(simmod.Broker, "tick", boom)
    r = run_scenario(SMALL, str(tmp_path))
    assert r.failed and "injected bug" in r.error
    assert json.loads((tmp_path / "report.json").read_text())["failed"] is True


def test_empty_workload():
    r = run_scenario({"seed": 1, "duration_s": 3, "drain_s": 1, "topology": {"nodes": [{"id": "b1"}]},
                      "workload": {"publishers": 0, "subscribers": 0}})
    assert (r.failed, r.delivery_ratio, r.throughput_mps, r.published) == (False, 1.0, 0.0, 0)
