"""Topic names and wildcard patterns.

``*`` matches exactly one segment, a terminal ``#`` matches zero or more
trailing segments (so ``a/#`` matches ``a`` as well as ``a/b/c``).
"""

from __future__ import annotations

from functools import lru_cache

from .wire import SYSTEM_PREFIX


class TopicError(ValueError):
    pass


def validate_topic(topic: str, allow_system: bool = False) -> str:
    if not isinstance(topic, str) or not topic:
        raise TopicError("topic must be a non-empty string")
    if not allow_system and topic.startswith(SYSTEM_PREFIX):
        raise TopicError(f"application topics may not start with {SYSTEM_PREFIX!r}: {topic}")
    for seg in topic.split("/"):
        if not seg:
            raise TopicError(f"empty segment in topic {topic!r}")
        if seg in ("*", "#"):
            raise TopicError(f"wildcard segment in topic {topic!r}")
    return topic


def validate_pattern(pattern: str) -> str:
    if not isinstance(pattern, str) or not pattern:
        raise TopicError("pattern must be a non-empty string")
    segs = pattern.split("/")
    for i, seg in enumerate(segs):
        if not seg:
            raise TopicError(f"empty segment in pattern {pattern!r}")
        if seg == "#" and i != len(segs) - 1:
            raise TopicError(f"'#' must be the last segment: {pattern!r}")
    return pattern


@lru_cache(maxsize=65536)
def _split(s: str) -> tuple[str, ...]:
    return tuple(s.split("/"))


def match(pattern: str, topic: str) -> bool:
    """True when ``topic`` falls under ``pattern``."""
    p, t = _split(pattern), _split(topic)
    n = len(p)
    if n and p[-1] == "#":
        n -= 1
        if len(t) < n:
            return False
    elif len(t) != n:
        return False
    for i in range(n):
        if p[i] != "*" and p[i] != t[i]:
            return False
    return True


def is_literal(pattern: str) -> bool:
    return "*" not in _split(pattern) and "#" not in _split(pattern)


def covers(scope: str, pattern: str) -> bool:
    """True when every topic matched by ``pattern`` is also matched by ``scope``."""
    s, p = _split(scope), _split(pattern)
    i = 0
    while True:
        if i == len(s):
            return i == len(p)
        if s[i] == "#":
            return True
        if i == len(p) or p[i] == "#":
            return False
        if s[i] != "*" and (p[i] == "*" or p[i] != s[i]):
            return False
        i += 1
