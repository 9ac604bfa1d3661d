"""Scenario files: schema, defaults and validation."""

from __future__ import annotations

import copy
import json
from typing import Any

import jsonschema

FAULT_KINDS = ("broker_crash", "link_drop", "selective_drop", "flood", "credential_misuse")

_NUM = {"type": "number", "minimum": 0}
_EVENT_REQUIRED = {
    "broker_crash": ["node"],
    "link_drop": ["rate"],
    "selective_drop": ["topic"],
    "flood": ["topic", "rate_mps"],
    "credential_misuse": ["principal"],
}

SCHEMA = {
    "type": "object",
    "required": ["seed", "topology", "workload"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "duration_s": _NUM,
        "drain_s": _NUM,
        "latency_s": _NUM,
        "pseudonyms": {"type": "boolean"},
        "capture_frames": {"type": "boolean"},
        "topology": {
            "type": "object",
            "required": ["nodes"],
            "properties": {
                "nodes": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["id"],
                        "properties": {
                            "id": {"type": "string", "minLength": 1},
                            "role": {"enum": ["operational", "managerial"]},
                        },
                    },
                },
                "groups": {"type": "object", "additionalProperties": {"type": "array", "items": {"type": "string"}}},
                "replication_factor": {"type": "integer", "minimum": 1},
                "sync_mirroring": {"type": "boolean"},
            },
        },
        "workload": {
            "type": "object",
            "properties": {
                "publishers": {"type": "integer", "minimum": 0},
                "subscribers": {"type": "integer", "minimum": 0},
                "topics": {"type": "array", "items": {"type": "string"}},
                "rate_mps": _NUM,
                "duration_s": _NUM,
                "messages": {"type": ["integer", "null"], "minimum": 0},
                "payload_bytes": {"type": "integer", "minimum": 0},
                "encrypt": {"type": "boolean"},
                "sign": {"type": "boolean"},
                "auth_strength": {"type": "integer", "minimum": 0, "maximum": 5},
                "poisson": {"type": "boolean"},
            },
        },
        "events": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["at_s", "kind"],
                "properties": {"at_s": _NUM, "kind": {"enum": list(FAULT_KINDS)}},
            },
        },
        "mode": {"enum": ["sim", "wallclock"]},
        "policy": {"type": "object"},
        "goals": {"type": "object"},
        "asm": {"type": "object"},
        "monitoring": {"type": "object"},
        "overlay": {"type": "object"},
        "broker": {"type": "object"},
    },
}

DEFAULT_WORKLOAD = {
    "publishers": 1,
    "subscribers": 1,
    "topics": ["app/t0"],
    "rate_mps": 100.0,
    "duration_s": 10.0,
    "messages": None,
    "payload_bytes": 64,
    "encrypt": True,
    "sign": False,
    "auth_strength": 3,
    "poisson": True,
}


class ScenarioError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid scenario: " + "; ".join(problems))
        self.problems = problems


def validate_scenario(doc: Any) -> dict:
    """Return a normalized copy, or raise ScenarioError naming every bad field."""
    v = jsonschema.Draft7Validator(SCHEMA)
    problems = []
    for err in sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path)):
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{where}: {err.message}")
    if problems:
        raise ScenarioError(problems)
    sc = copy.deepcopy(doc)
    wl = dict(DEFAULT_WORKLOAD)
    wl.update(sc.get("workload") or {})
    sc["workload"] = wl
    sc.setdefault("name", "scenario")
    sc.setdefault("mode", "sim")
    sc.setdefault("latency_s", 0.001)
    sc.setdefault("pseudonyms", False)
    sc.setdefault("capture_frames", True)
    sc.setdefault("events", [])
    topo = sc["topology"]
    topo.setdefault("groups", {"default": ["#"]})
    topo.setdefault("replication_factor", min(2, len(topo["nodes"])))
    topo.setdefault("sync_mirroring", False)
    if wl["messages"] is not None and wl["rate_mps"] > 0:
        wl["duration_s"] = wl["messages"] / wl["rate_mps"]
    sc.setdefault("duration_s", wl["duration_s"])
    sc.setdefault("drain_s", 30.0)
    node_ids = [n["id"] for n in topo["nodes"]]
    if len(set(node_ids)) != len(node_ids):
        problems.append("topology/nodes: duplicate node id")
    for i, ev in enumerate(sc["events"]):
        for req in _EVENT_REQUIRED[ev["kind"]]:
            if req not in ev:
                problems.append(f"events/{i}: {ev['kind']} requires {req!r}")
        if ev["at_s"] > sc["duration_s"]:
            problems.append(f"events/{i}: at_s {ev['at_s']} beyond duration {sc['duration_s']}")
        if ev["kind"] == "broker_crash" and ev.get("node") not in node_ids:
            problems.append(f"events/{i}: unknown node {ev.get('node')!r}")
        if ev["kind"] == "link_drop" and not 0 <= ev.get("rate", 0) <= 1:
            problems.append(f"events/{i}: rate must be in [0,1]")
    if problems:
        raise ScenarioError(problems)
    return sc


def load_scenario(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError([f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}"]) from None
    return validate_scenario(doc)
