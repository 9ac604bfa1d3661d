"""Bayesian trust, confidence and trustworthiness.

Evidence about an entity is a Beta(alpha, beta) posterior starting from the
uniform prior Beta(1, 1).  Trust is the posterior mean; confidence is one
minus the posterior standard deviation relative to the prior's; the two
multiply into trustworthiness.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Optional

from .monitoring import BmcNode, BmcTree, aggregate_tree

PRIOR_SD = math.sqrt(1.0 / 12.0)  # sd of Beta(1, 1)


@dataclass(frozen=True)
class TrustRecord:
    entity_id: str
    alpha: float = 1.0
    beta: float = 1.0
    updated: float = 0.0

    def __post_init__(self):
        if self.alpha < 1 or self.beta < 1:
            raise ValueError("alpha and beta include the Beta(1,1) prior and must be >= 1")


@dataclass(frozen=True)
class TrustValues:
    trust: float
    confidence: float
    trustworthiness: float


@dataclass(frozen=True)
class RiskScore:
    likelihood: float
    impact: float
    score: float


def _unit(name: str, v: float) -> None:
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name} must be in [0,1], got {v}")


def update_evidence(r: TrustRecord, outcome: str, at: Optional[float] = None) -> TrustRecord:
    when = r.updated if at is None else at
    if outcome == "success":
        return replace(r, alpha=r.alpha + 1, updated=when)
    if outcome == "failure":
        return replace(r, beta=r.beta + 1, updated=when)
    raise ValueError(f"outcome must be 'success' or 'failure', got {outcome!r}")


def trust(r: TrustRecord) -> float:
    return r.alpha / (r.alpha + r.beta)


def beta_sd(alpha: float, beta: float) -> float:
    n = alpha + beta
    return math.sqrt(alpha * beta / (n * n * (n + 1)))


def confidence(r: TrustRecord) -> float:
    return min(max(1.0 - beta_sd(r.alpha, r.beta) / PRIOR_SD, 0.0), 1.0)


def trustworthiness(t: float, c: float) -> float:
    _unit("trust", t)
    _unit("confidence", c)
    return t * c


def values(r: TrustRecord) -> TrustValues:
    t, c = trust(r), confidence(r)
    return TrustValues(t, c, trustworthiness(t, c))


def suspicion(r: TrustRecord) -> float:
    """How far trust has fallen below the neutral prior, scaled to [0,1]."""
    return min(max(1.0 - 2.0 * trust(r), 0.0), 1.0)


def compute_risk(likelihood: float, impact: float) -> RiskScore:
    _unit("likelihood", likelihood)
    _unit("impact", impact)
    return RiskScore(likelihood, impact, likelihood * impact)


def risk_rank(items: Iterable[tuple[str, RiskScore]]) -> list[tuple[str, RiskScore]]:
    return sorted(items, key=lambda it: (-it[1].score, it[0]))


def effective_trustworthiness(tw: float, security_level: float, risk: float, w_s: float = 0.5, w_r: float = 0.5) -> float:
    """Trustworthiness discounted by a weak security level and by risk."""
    _unit("trustworthiness", tw)
    _unit("security_level", security_level)
    _unit("risk", risk)
    return tw * (w_s * security_level + (1 - w_s)) * (1 - w_r * risk)


def aggregate_trust(tree: BmcTree, leaf_values: Mapping[str, TrustValues]) -> dict[str, TrustValues]:
    """Propagate leaf trust values up the tree, component by component."""

    def component(name: str):
        def leaf(node: BmcNode) -> float:
            try:
                return getattr(leaf_values[node.id], name)
            except KeyError:
                raise ValueError(f"no trust values for leaf {node.id}") from None

        return aggregate_tree(tree, leaf)

    t, c, tw = component("trust"), component("confidence"), component("trustworthiness")
    return {nid: TrustValues(t[nid], c[nid], tw[nid]) for nid in t}


class TrustEngine:
    """Evidence ingestion loop state: one record per entity, plus a trace."""

    def __init__(self, success_sample_every: int = 10):
        self.records: dict[str, TrustRecord] = {}
        self.success_sample_every = success_sample_every
        self._success_seen: dict[str, int] = {}
        self.trace: list[tuple] = []

    def open(self, entity_id: str, at: float = 0.0) -> TrustRecord:
        if entity_id not in self.records:
            self.records[entity_id] = TrustRecord(entity_id, updated=at)
        return self.records[entity_id]

    def observe(self, entity_id: str, outcome: str, at: float) -> TrustRecord:
        rec = self.open(entity_id, at)
        if outcome == "success":
            # successes are common; only every n-th one counts as evidence
            n = self._success_seen.get(entity_id, 0) + 1
            self._success_seen[entity_id] = n
            if n % self.success_sample_every:
                return rec
        rec = update_evidence(rec, outcome, at)
        self.records[entity_id] = rec
        v = values(rec)
        self.trace.append((at, entity_id, rec.alpha, rec.beta, v.trust, v.confidence, v.trustworthiness))
        return rec

    def values(self, entity_id: str) -> TrustValues:
        return values(self.records.get(entity_id) or TrustRecord(entity_id))

    def suspicion(self) -> dict[str, float]:
        return {eid: suspicion(r) for eid, r in self.records.items()}

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ts", "entity_id", "alpha", "beta", "trust", "confidence", "trustworthiness"])
            w.writerows(self.trace)
