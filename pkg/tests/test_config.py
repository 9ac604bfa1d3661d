import json

import pytest

from gemombus.audit import AuditLog
from gemombus.config import DEFAULTS, ConfigError, env_key, load_config
from gemombus.scenario import ScenarioError, load_scenario, validate_scenario


def test_defaults_are_valid():
    cfg = load_config(environ={})
    assert cfg["asm.trigger_hi"] == 0.7
    assert cfg.host_port() == ("127.0.0.1", 7400)


def test_precedence_file_env_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"asm.period_ms": 200, "broker.max_redelivery": 5}))
    env = {env_key("asm.period_ms"): "300", env_key("overlay.sync_mirroring"): "true"}
    cfg = load_config(str(path), {"broker.max_redelivery": 7}, environ=env)
    assert cfg["asm.period_ms"] == 300
    assert cfg["broker.max_redelivery"] == 7
    assert cfg["overlay.sync_mirroring"] is True


def test_every_violation_is_reported(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"asm.trigger_hi": 1.5, "kmf.default_bits": 100, "bogus": 1, "listen": "nowhere",
                                "policy.file": str(tmp_path / "missing.json")}))
    with pytest.raises(ConfigError) as info:
        load_config(str(path), environ={})
    text = "\n".join(info.value.violations)
    for needle in ("asm.trigger_hi", "kmf.default_bits", "bogus: unknown key", "listen", "directory.file", "policy.file: file not found"):
        assert needle in text


def test_threshold_ordering_enforced():
    with pytest.raises(ConfigError, match="release_hi < trigger_hi"):
        load_config(environ={}, overrides={"asm.release_hi": 0.8})
    with pytest.raises(ConfigError, match="suspect_timeout_s"):
        load_config(environ={}, overrides={"overlay.suspect_timeout_s": 20})


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "none.json"), environ={})
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(str(bad), environ={})
    bad.write_text("[1]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config(str(bad), environ={})


def test_env_keys_cover_defaults():
    assert all(env_key(k).startswith("GEMOM_") and "." not in env_key(k) for k in DEFAULTS)


# scenarios

MINIMAL = {"seed": 1, "topology": {"nodes": [{"id": "b1"}]}, "workload": {}}


def test_scenario_defaults():
    sc = validate_scenario(MINIMAL)
    assert sc["mode"] == "sim" and sc["events"] == [] and sc["workload"]["rate_mps"] == 100.0
    assert validate_scenario(sc) == sc  # normalizing twice changes nothing


def test_messages_set_duration():
    sc = validate_scenario(dict(MINIMAL, workload={"messages": 500, "rate_mps": 100}))
    assert sc["duration_s"] == 5.0


@pytest.mark.parametrize("doc, needle", [
    ({"topology": {"nodes": [{"id": "b1"}]}, "workload": {}}, "seed"),
    (dict(MINIMAL, seed=-1), "seed"),
    (dict(MINIMAL, topology={"nodes": [{"id": "b1"}, {"id": "b1"}]}), "duplicate"),
    (dict(MINIMAL, events=[{"at_s": 1, "kind": "meteor"}]), "kind"),
    (dict(MINIMAL, events=[{"at_s": 1, "kind": "broker_crash", "node": "b9"}]), "unknown node"),
    (dict(MINIMAL, events=[{"at_s": 1, "kind": "flood", "topic": "t"}]), "rate_mps"),
    (dict(MINIMAL, events=[{"at_s": 1, "kind": "link_drop", "rate": 2}]), "rate must be"),
    (dict(MINIMAL, duration_s=5, events=[{"at_s": 9, "kind": "link_drop", "rate": 0.1}]), "beyond duration"),
])
def test_scenario_errors(doc, needle):
    with pytest.raises(ScenarioError) as info:
        validate_scenario(doc)
    assert needle in str(info.value)


def test_scenario_file_errors(tmp_path):
    p = tmp_path / "s.json"
    p.write_text("{")
    with pytest.raises(ScenarioError, match="invalid JSON"):
        load_scenario(p)


# audit


def test_audit_log(tmp_path):
    t = iter([5.0, 5.0, 4.0])
    log = AuditLog(str(tmp_path / "a.jsonl"), clock=lambda: next(t))
    a = log("auth", "alice", event="x")
    b = log("key", "kmf", event="y")
    c = log("adapt", "asm", event="z")
    assert a.ts < b.ts < c.ts  # strictly increasing even if the clock is not
    lines = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [l["category"] for l in lines] == ["auth", "key", "adapt"]
    assert len(log.by_category("key")) == 1
    with pytest.raises(ValueError):
        log("gossip", "x")
    log.close()


def test_audit_overflow_is_counted():
    published = []
    log = AuditLog(capacity=3, publish=published.append)
    for i in range(10):
        log("auth", "a", n=i)
    assert len(log.events) == 3 and log.dropped == 7
    assert [e.detail["n"] for e in log.events] == [7, 8, 9]
    assert len(published) == 10


def test_unwritable_audit_path_fails_fast(tmp_path):
    with pytest.raises(OSError):
        AuditLog(str(tmp_path / "no" / "such" / "dir.jsonl"))
