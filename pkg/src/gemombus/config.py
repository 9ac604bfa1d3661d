"""Node configuration: one flat JSON object with dotted keys.

Precedence is CLI overrides, then ``GEMOM_*`` environment variables, then
the file, then defaults.  Validation reports every violation at once.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FATAL = 3

DEFAULTS: dict[str, Any] = {
    "node.id": "node1",
    "node.role": "operational",
    "listen": "127.0.0.1:7400",
    "kmf.address": "127.0.0.1:7500",
    "kmf.id": "kmf",
    "kmf.default_bits": 128,
    "kmf.eager_regeneration": False,
    "kmf.public_key_file": None,
    "directory.file": None,
    "asm.period_ms": 1000,
    "asm.trigger_hi": 0.7,
    "asm.trigger_mid": 0.4,
    "asm.release_hi": 0.6,
    "asm.release_mid": 0.3,
    "asm.lambda_t": 0.3,
    "asm.baseline_floor": 0,
    "asm.staleness_s": 5.0,
    "monitoring.lambda": 0.1,
    "monitoring.z_max": 6.0,
    "monitoring.warmup": 5,
    "monitoring.capacity": 100_000,
    "policy.file": None,
    "audit.file": None,
    "overlay.suspect_timeout_s": 5.0,
    "overlay.dead_timeout_s": 15.0,
    "overlay.heartbeat_s": 1.0,
    "overlay.replication_factor": 2,
    "overlay.sync_mirroring": False,
    "broker.max_frame": 1 << 20,
    "broker.max_redelivery": 3,
    "broker.ack_timeout_s": 1.0,
    "broker.replay_capacity": 10_000,
}

_UNIT = (0.0, 1.0)
_RANGES = {
    "asm.period_ms": (1, None),
    "asm.trigger_hi": _UNIT,
    "asm.trigger_mid": _UNIT,
    "asm.release_hi": _UNIT,
    "asm.release_mid": _UNIT,
    "asm.lambda_t": (1e-12, 1.0),
    "asm.baseline_floor": (0, 5),
    "asm.staleness_s": (0.0, None),
    "monitoring.lambda": (1e-12, 1.0),
    "monitoring.z_max": (1e-12, None),
    "monitoring.warmup": (0, None),
    "monitoring.capacity": (1, None),
    "overlay.suspect_timeout_s": (1e-9, None),
    "overlay.dead_timeout_s": (1e-9, None),
    "overlay.heartbeat_s": (1e-9, None),
    "overlay.replication_factor": (1, None),
    "broker.max_frame": (64, None),
    "broker.max_redelivery": (1, None),
    "broker.ack_timeout_s": (1e-9, None),
    "broker.replay_capacity": (1, None),
}


class ConfigError(Exception):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class NodeConfig:
    values: Mapping[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default=None) -> Any:
        return self.values.get(key, default)

    @property
    def node_id(self) -> str:
        return self.values["node.id"]

    def host_port(self, key: str = "listen") -> tuple[str, int]:
        host, port = self.values[key].rsplit(":", 1)
        return host, int(port)


def env_key(key: str) -> str:
    return "GEMOM_" + key.upper().replace(".", "_")


def _coerce(value: Any, like: Any) -> Any:
    if isinstance(value, str) and not isinstance(like, str) and like is not None:
        if isinstance(like, bool):
            return value.strip().lower() in ("1", "true", "yes", "on")
        try:
            return json.loads(value)
        except ValueError:
            return value
    return value


def validate(values: Mapping[str, Any], check_files: bool = True) -> list[str]:
    errors = []
    for key, (lo, hi) in _RANGES.items():
        v = values.get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            errors.append(f"{key}: expected a number, got {v!r}")
            continue
        if v < lo or (hi is not None and v > hi):
            errors.append(f"{key}: {v} outside [{lo}, {hi if hi is not None else 'inf'}]")
    if values.get("kmf.default_bits") not in (128, 192, 256):
        errors.append(f"kmf.default_bits: must be 128, 192 or 256, got {values.get('kmf.default_bits')!r}")
    if values.get("node.role") not in ("operational", "managerial"):
        errors.append(f"node.role: must be operational or managerial, got {values.get('node.role')!r}")
    for key in ("listen", "kmf.address"):
        v = values.get(key)
        if not isinstance(v, str) or ":" not in v or not v.rsplit(":", 1)[1].isdigit():
            errors.append(f"{key}: expected host:port, got {v!r}")
    if not errors or all(not e.startswith("asm.") for e in errors):
        if not values["asm.release_mid"] < values["asm.trigger_mid"] <= values["asm.trigger_hi"]:
            errors.append("asm: need release_mid < trigger_mid <= trigger_hi")
        if not values["asm.release_hi"] < values["asm.trigger_hi"]:
            errors.append("asm: need release_hi < trigger_hi")
    if values.get("policy.file") is not None and values.get("directory.file") is None:
        errors.append("directory.file: required when policy.file is set (maps principals to groups)")
    st, dt = values.get("overlay.suspect_timeout_s"), values.get("overlay.dead_timeout_s")
    if isinstance(st, (int, float)) and isinstance(dt, (int, float)) and not st < dt:
        errors.append("overlay: suspect_timeout_s must be below dead_timeout_s")
    if check_files:
        for key in ("policy.file", "kmf.public_key_file", "directory.file"):
            path = values.get(key)
            if path is not None and not os.path.exists(path):
                errors.append(f"{key}: file not found: {path}")
    return errors


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> NodeConfig:
    """Merge defaults, file, environment and overrides; raise ConfigError listing every problem."""
    environ = os.environ if environ is None else environ
    path = path or environ.get("GEMOM_CONFIG")
    values = dict(DEFAULTS)
    errors = []
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError([f"config file not found: {path}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"]) from None
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: top level must be a JSON object"])
        for k, v in data.items():
            if k not in DEFAULTS:
                errors.append(f"{k}: unknown key")
            else:
                values[k] = v
    for k in DEFAULTS:
        ek = env_key(k)
        if ek in environ:
            values[k] = _coerce(environ[ek], DEFAULTS[k])
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in DEFAULTS:
            errors.append(f"{k}: unknown key")
        else:
            values[k] = _coerce(v, DEFAULTS[k])
    errors += validate(values)
    if errors:
        raise ConfigError(errors)
    return NodeConfig(values)
