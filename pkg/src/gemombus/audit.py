"""Append-only structured audit log.

Events go to an in-memory bounded queue and, when a path is configured, to
a line-delimited JSON file.  When the queue overflows the oldest entry is
dropped and the loss is counted; the counter itself is audited.
"""

from __future__ import annotations

import json
import sys
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

CATEGORIES = ("auth", "authz", "key", "adapt", "overlay")


@dataclass(frozen=True)
class AuditEvent:
    ts: float
    category: str
    actor: str
    detail: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"ts": self.ts, "category": self.category, "actor": self.actor, "detail": self.detail}


class AuditLog:
    def __init__(
        self,
        path: Optional[str] = None,
        clock: Callable[[], float] = time.time,
        capacity: int = 100_000,
        publish: Optional[Callable[[AuditEvent], None]] = None,
    ):
        self.clock = clock
        self.events: deque = deque()
        self.capacity = capacity
        self.dropped = 0
        self.publish = publish
        self._last_ts = float("-inf")
        self._fh = None
        self.path = path
        if path is not None:
            # unwritable at startup is fatal: let the OSError propagate
            self._fh = open(path, "a", encoding="utf-8")

    def __call__(self, category: str, actor: str, **detail) -> AuditEvent:
        return self.emit(category, actor, **detail)

    def emit(self, category: str, actor: str, **detail) -> AuditEvent:
        if category not in CATEGORIES:
            raise ValueError(f"unknown audit category {category!r}")
        ts = self.clock()
        if ts <= self._last_ts:
            ts = self._last_ts + 1e-6
        self._last_ts = ts
        ev = AuditEvent(ts, category, actor, detail)
        if len(self.events) >= self.capacity:
            self.events.popleft()
            self.dropped += 1
            if self.dropped & (self.dropped - 1) == 0:  # powers of two, to stay quiet
                self._write(AuditEvent(ts, "adapt", "audit", {"event": "audit-overflow", "dropped": self.dropped}))
        self.events.append(ev)
        self._write(ev)
        if self.publish is not None:
            self.publish(ev)
        return ev

    def _write(self, ev: AuditEvent) -> None:
        if self._fh is None:
            return
        line = json.dumps(ev.to_json(), sort_keys=True, default=str)
        try:
            self._fh.write(line + "\n")
            self._fh.flush()
        except OSError:
            print(line, file=sys.stderr)

    def by_category(self, category: str) -> list[AuditEvent]:
        return [e for e in self.events if e.category == category]

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
