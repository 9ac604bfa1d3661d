"""Metric ingestion, thresholds, anomaly scoring and the BMC level tree.

Also home to the two learned detectors: a first-order Markov predictor for
discretized resource levels and a discretized Naive Bayes bottleneck
classifier.  Both follow the scikit-learn estimator protocol.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

log = logging.getLogger(__name__)

SEVERITIES = ("info", "warn", "critical")


class MonitoringError(Exception):
    pass


class TimeRegression(MonitoringError):
    pass


class TreeError(MonitoringError):
    pass


@dataclass(frozen=True)
class MetricSample:
    metric_id: str
    value: float
    at: float
    source: str = ""


@dataclass(frozen=True)
class Threshold:
    metric_id: str
    lo: Optional[float] = None
    hi: Optional[float] = None
    severity: str = "warn"

    def __post_init__(self):
        if self.lo is not None and self.hi is not None and not self.lo < self.hi:
            raise ValueError(f"threshold for {self.metric_id}: lo must be < hi")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")

    def violation(self, value: float) -> Optional[float]:
        """The violated bound, or None."""
        if self.hi is not None and value > self.hi:
            return self.hi
        if self.lo is not None and value < self.lo:
            return self.lo
        return None


@dataclass(frozen=True)
class ThresholdEvent:
    metric_id: str
    severity: str
    value: float
    bound: float
    at: float


# EWMA and anomaly score


@dataclass(frozen=True)
class EwmaState:
    metric_id: str
    lam: float
    mean: float = 0.0
    var: float = 0.0
    n: int = 0

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must be in (0, 1], got {self.lam}")


def ewma_update(st: EwmaState, x: float, eps: float = 1e-9) -> tuple[EwmaState, float]:
    """Fold one observation in; returns the new state and the residual z.

    z is measured against the state *before* the update.  The first
    observation seeds the mean and yields z = 0.
    """
    if st.n == 0:
        return replace(st, mean=float(x), var=0.0, n=1), 0.0
    r = x - st.mean
    z = r / max(math.sqrt(st.var), eps)
    lam = st.lam
    return replace(st, mean=lam * x + (1 - lam) * st.mean, var=lam * r * r + (1 - lam) * st.var, n=st.n + 1), z


def anomaly_score(z: float, z_max: float = 6.0) -> float:
    return min(abs(z) / z_max, 1.0)


# Markov prediction


def markov_predict(matrix, current_bin: int, atol: float = 1e-9) -> tuple[np.ndarray, int]:
    """Next-bin distribution and its argmax (lowest bin wins ties)."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("transition matrix must be square")
    row = m[current_bin]
    if np.any(row < 0) or abs(row.sum() - 1.0) > atol:
        raise ValueError(f"row {current_bin} is not a probability distribution")
    return row.copy(), int(np.argmax(row))  # argmax returns the first maximum


class MarkovPredictor(BaseEstimator):
    """First-order Markov chain over discretized levels of one resource.

    ``fit`` takes a 1-D trace of raw values; they are binned with
    ``bin_edges`` (interior edges, ascending).  Rows never visited fall back
    to staying put.
    """

    def __init__(self, bin_edges=(0.25, 0.5, 0.75)):
        self.bin_edges = bin_edges

    def discretize(self, values) -> np.ndarray:
        return np.searchsorted(np.asarray(self.bin_edges, dtype=float), np.asarray(values, dtype=float), side="right")

    def fit(self, X, y=None):
        trace = check_array(np.asarray(X, dtype=float).reshape(-1, 1), ensure_min_samples=2).ravel()
        states = self.discretize(trace)
        k = len(self.bin_edges) + 1
        counts = np.zeros((k, k))
        np.add.at(counts, (states[:-1], states[1:]), 1)
        totals = counts.sum(axis=1, keepdims=True)
        matrix = np.where(totals > 0, counts / np.where(totals == 0, 1, totals), np.eye(k))
        self.n_states_ = k
        self.counts_ = counts
        self.transition_matrix_ = matrix
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "transition_matrix_")
        bins = self.discretize(np.asarray(X, dtype=float).ravel())
        return np.vstack([markov_predict(self.transition_matrix_, b)[0] for b in bins])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "transition_matrix_")
        bins = self.discretize(np.asarray(X, dtype=float).ravel())
        return np.array([markov_predict(self.transition_matrix_, b)[1] for b in bins])


# Naive Bayes bottleneck detection


class NaiveBayesBottleneck(ClassifierMixin, BaseEstimator):
    """Discretized Naive Bayes with add-one smoothing.

    Class 1 is "bottleneck", class 0 is "normal".  Bin edges are either
    supplied per feature (interior edges) or taken as equal-width cuts over
    the training range.  Features outside the fitted range fall into the
    edge bins.
    """

    def __init__(self, n_bins: int = 5, bin_edges=None, alpha: float = 1.0, priors=None):
        self.n_bins = n_bins
        self.bin_edges = bin_edges
        self.alpha = alpha
        self.priors = priors

    def _edges(self, X):
        if self.bin_edges is not None:
            return [np.asarray(e, dtype=float) for e in self.bin_edges]
        out = []
        for j in range(X.shape[1]):
            lo, hi = X[:, j].min(), X[:, j].max()
            out.append(np.linspace(lo, hi, self.n_bins + 1)[1:-1])
        return out

    def _bins(self, X) -> np.ndarray:
        return np.column_stack([np.searchsorted(e, X[:, j], side="right") for j, e in enumerate(self.bin_edges_)])

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.array([0, 1])
        if not set(np.unique(y)) <= {0, 1}:
            raise ValueError("labels must be 0 (normal) or 1 (bottleneck)")
        self.bin_edges_ = self._edges(X)
        if len(self.bin_edges_) != X.shape[1]:
            raise ValueError("one set of bin edges per feature is required")
        self.n_features_in_ = X.shape[1]
        nb = max(len(e) for e in self.bin_edges_) + 1
        bins = self._bins(X)
        counts = np.zeros((2, X.shape[1], nb), dtype=np.int64)
        for c in (0, 1):
            for j in range(X.shape[1]):
                counts[c, j] = np.bincount(bins[y == c, j], minlength=nb)[:nb]
        self.counts_ = counts
        self.class_count_ = np.array([(y == 0).sum(), (y == 1).sum()])
        self.n_bins_ = np.array([len(e) + 1 for e in self.bin_edges_])
        return self

    @classmethod
    def from_counts(cls, bin_edges, counts, class_count, priors=None, alpha=1) -> "NaiveBayesBottleneck":
        """Build a fitted model straight from a count table.

        ``counts[c][j][b]`` is the number of class-``c`` training rows whose
        feature ``j`` fell in bin ``b``.
        """
        m = cls(bin_edges=bin_edges, alpha=alpha, priors=priors)
        m.classes_ = np.array([0, 1])
        m.bin_edges_ = [np.asarray(e, dtype=float) for e in bin_edges]
        m.n_features_in_ = len(m.bin_edges_)
        m.counts_ = np.asarray(counts, dtype=np.int64)
        m.class_count_ = np.asarray(class_count, dtype=np.int64)
        m.n_bins_ = np.array([len(e) + 1 for e in m.bin_edges_])
        return m

    def _prior(self, c: int) -> Fraction:
        if self.priors is not None:
            return Fraction(self.priors[c])
        total = int(self.class_count_.sum())
        a = Fraction(self.alpha)
        return (int(self.class_count_[c]) + a) / (total + 2 * a)

    def likelihood(self, c: int, j: int, b: int) -> Fraction:
        a = Fraction(self.alpha)
        row = self.counts_[c, j, : self.n_bins_[j]]
        return (int(row[b]) + a) / (int(row.sum()) + a * int(self.n_bins_[j]))

    def nb_classify(self, features) -> float:
        """P(bottleneck | features), evaluated in exact rational arithmetic."""
        check_is_fitted(self, "counts_")
        x = np.asarray(features, dtype=float).reshape(1, -1)
        if x.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {x.shape[1]}")
        bins = self._bins(x)[0]
        score = []
        for c in (0, 1):
            s = self._prior(c)
            for j, b in enumerate(bins):
                s *= self.likelihood(c, j, int(b))
            score.append(s)
        return float(score[1] / (score[0] + score[1]))

    def predict_log_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "counts_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        bins = self._bins(X)
        jll = np.zeros((X.shape[0], 2))
        for c in (0, 1):
            jll[:, c] = math.log(self._prior(c))
            for j in range(X.shape[1]):
                row = self.counts_[c, j, : self.n_bins_[j]].astype(float)
                logp = np.log((row + self.alpha) / (row.sum() + self.alpha * self.n_bins_[j]))
                jll[:, c] += logp[bins[:, j]]
        norm = np.logaddexp(jll[:, 0], jll[:, 1])
        return jll - norm[:, None]

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(self.predict_log_proba(X))

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_log_proba(X), axis=1)]


def nb_classify(model: NaiveBayesBottleneck, features) -> float:
    return model.nb_classify(features)


# BMC tree


@dataclass
class BmcNode:
    id: str
    name: str
    parent: Optional[str] = None
    weight: float = 1.0
    critical: bool = False
    level: Optional[float] = None
    children: list = field(default_factory=list)


class BmcTree:
    """Decomposition of a security objective down to measurable leaves."""

    def __init__(self):
        self.nodes: dict[str, BmcNode] = {}

    def add(self, id: str, name: str = "", parent: Optional[str] = None, weight: float = 1.0,
            critical: bool = False, level: Optional[float] = None) -> BmcNode:
        if id in self.nodes:
            raise TreeError(f"duplicate BMC id {id}")
        if weight <= 0:
            raise TreeError(f"weight of {id} must be positive")
        node = BmcNode(id, name or id, parent, weight, critical, level)
        self.nodes[id] = node
        if parent is not None:
            if parent not in self.nodes:
                raise TreeError(f"unknown parent {parent}")
            self.nodes[parent].children.append(id)
        return node

    def leaves(self) -> list[str]:
        return [n.id for n in self.nodes.values() if not n.children]

    def root(self) -> str:
        roots = [n.id for n in self.nodes.values() if n.parent is None]
        if len(roots) != 1:
            raise TreeError(f"tree must have exactly one root, found {len(roots)}")
        return roots[0]

    def set_level(self, id: str, level: float) -> None:
        if not 0.0 <= level <= 1.0:
            raise ValueError(f"level must be in [0,1], got {level}")
        self.nodes[id].level = level

    def copy(self) -> "BmcTree":
        t = BmcTree()
        for n in self.nodes.values():
            t.nodes[n.id] = replace(n, children=list(n.children))
        return t


def combine(tree: BmcTree, node: BmcNode, child_values: list[float]) -> float:
    """Weighted mean of children; critical nodes take the weakest child."""
    if node.critical:
        return min(child_values)
    weights = [tree.nodes[c].weight for c in node.children]
    total = sum(weights)
    return sum(w / total * v for w, v in zip(weights, child_values))


def aggregate_tree(tree: BmcTree, leaf_value: Callable[[BmcNode], float]) -> dict[str, float]:
    root = tree.root()
    out: dict[str, float] = {}
    state: dict[str, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        nid, expanded = stack.pop()
        node = tree.nodes.get(nid)
        if node is None:
            raise TreeError(f"dangling child reference {nid}")
        if expanded:
            out[nid] = leaf_value(node) if not node.children else combine(tree, node, [out[c] for c in node.children])
            state[nid] = 2
            continue
        if state.get(nid) == 1:
            raise TreeError(f"cycle through {nid}")
        if state.get(nid) == 2:
            raise TreeError(f"node {nid} reachable twice")
        state[nid] = 1
        stack.append((nid, True))
        for c in node.children:
            if state.get(c) == 1:
                raise TreeError(f"cycle through {c}")
            stack.append((c, False))
    if len(out) != len(tree.nodes):
        raise TreeError("tree has unreachable nodes or a cycle detached from the root")
    return out


def aggregate_levels(tree: BmcTree) -> dict[str, float]:
    def leaf(node: BmcNode) -> float:
        if node.level is None:
            raise TreeError(f"leaf {node.id} has no level")
        return node.level

    return aggregate_tree(tree, leaf)


def default_bmc_tree() -> BmcTree:
    t = BmcTree()
    t.add("security", "overall security")
    t.add("authentication", parent="security")
    t.add("authentication.failures", parent="authentication")
    t.add("authentication.token_failures", parent="authentication")
    t.add("authorization", parent="security")
    t.add("authorization.denials", parent="authorization")
    t.add("confidentiality", parent="security", critical=True)
    t.add("confidentiality.key_strength", parent="confidentiality")
    t.add("confidentiality.key_age", parent="confidentiality")
    t.add("availability", parent="security")
    t.add("availability.delivery", parent="availability")
    t.add("availability.overlay", parent="availability")
    return t


# the monitor


@dataclass
class ConfigDelta:
    changes: list = field(default_factory=list)  # (kind, id, old, new)
    warnings: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.changes)


class Monitor:
    """Single-writer metric store with thresholds and per-metric EWMA."""

    def __init__(
        self,
        lam: float = 0.1,
        z_max: float = 6.0,
        eps: float = 1e-9,
        warmup: int = 5,
        gate_outliers: bool = True,
        relearn_after: int = 30,
        capacity: int = 100_000,
        tree: Optional[BmcTree] = None,
        audit: Optional[Callable[..., None]] = None,
    ):
        if not 0.0 < lam <= 1.0:
            raise ValueError("lambda must be in (0, 1]")
        self.lam = lam
        self.z_max = z_max
        self.eps = eps
        self.warmup = warmup
        self.gate_outliers = gate_outliers
        self.relearn_after = relearn_after
        self.thresholds: dict[str, list[Threshold]] = {}
        self.baseline_thresholds: dict[str, list[Threshold]] = {}
        self.ewma: dict[str, EwmaState] = {}
        self.last_ts: dict[str, float] = {}
        self.scores: dict[str, float] = {}
        self.outlier_run: dict[str, int] = {}
        self.rows: deque = deque(maxlen=capacity)
        self.tree = tree or default_bmc_tree()
        self.audit = audit or (lambda *a, **k: None)
        self.profile = "normal"

    def add_threshold(self, th: Threshold) -> None:
        self.thresholds.setdefault(th.metric_id, []).append(th)
        self.baseline_thresholds.setdefault(th.metric_id, []).append(th)

    def set_lambda(self, lam: float) -> None:
        if not 0.0 < lam <= 1.0:
            raise ValueError("lambda must be in (0, 1]")
        self.lam = lam

    def record_sample(self, s: MetricSample) -> list[ThresholdEvent]:
        last = self.last_ts.get(s.metric_id)
        if last is not None and s.at < last:
            raise TimeRegression(f"{s.metric_id}: sample at {s.at} precedes {last}")
        self.last_ts[s.metric_id] = s.at
        events = []
        for th in self.thresholds.get(s.metric_id, ()):
            bound = th.violation(s.value)
            if bound is not None:
                events.append(ThresholdEvent(s.metric_id, th.severity, s.value, bound, s.at))
        st = self.ewma.get(s.metric_id) or EwmaState(s.metric_id, self.lam)
        if st.lam != self.lam:
            st = replace(st, lam=self.lam)
        new, z = ewma_update(st, s.value, self.eps)
        score = anomaly_score(z, self.z_max) if st.n >= self.warmup else 0.0
        if self.gate_outliers and score >= 1.0:
            # keep attack traffic out of the baseline, unless the shift persists
            run = self.outlier_run.get(s.metric_id, 0) + 1
            self.outlier_run[s.metric_id] = run
            if run >= self.relearn_after:
                self.outlier_run[s.metric_id] = 0
                new = EwmaState(s.metric_id, self.lam)
                new, _ = ewma_update(new, s.value, self.eps)
                self.ewma[s.metric_id] = new
        else:
            self.outlier_run[s.metric_id] = 0
            self.ewma[s.metric_id] = new
        self.scores[s.metric_id] = score
        self.rows.append((s.at, s.metric_id, s.value, self.ewma[s.metric_id].mean, z, score))
        return events

    def fuse_offline(self, report: Mapping) -> ConfigDelta:
        """Apply revised thresholds and BMC weights from an off-line analysis."""
        delta = ConfigDelta()
        thresholds = {k: list(v) for k, v in self.thresholds.items()}
        weights = {}
        for mid, spec in (report.get("thresholds") or {}).items():
            if mid not in thresholds:
                delta.warnings.append(f"unknown metric {mid}")
                continue
            new_list = []
            for th in thresholds[mid]:
                new = replace(th, lo=spec.get("lo", th.lo), hi=spec.get("hi", th.hi))
                if new != th:
                    delta.changes.append(("threshold", mid, (th.lo, th.hi), (new.lo, new.hi)))
                new_list.append(new)
            thresholds[mid] = new_list
        for bid, w in (report.get("weights") or {}).items():
            if bid not in self.tree.nodes:
                delta.warnings.append(f"unknown BMC {bid}")
                continue
            if w <= 0:
                delta.warnings.append(f"non-positive weight for {bid}")
                continue
            old = self.tree.nodes[bid].weight
            if old != w:
                weights[bid] = w
                delta.changes.append(("weight", bid, old, w))
        for warning in delta.warnings:
            log.warning("offline report: %s", warning)
        # swap in one step
        self.thresholds = thresholds
        for bid, w in weights.items():
            self.tree.nodes[bid].weight = w
        for kind, id_, old, new in delta.changes:
            self.audit("adapt", "monitor", event="fuse-offline", kind=kind, id=id_, old=old, new=new)
        return delta

    def set_profile(self, profile: str, tighten: float = 0.8) -> ConfigDelta:
        """Strict profile scales every band toward zero by ``tighten``."""
        if profile not in ("normal", "strict"):
            raise ValueError(f"unknown thresholds profile {profile!r}")
        report = {"thresholds": {}}
        for mid, ths in self.baseline_thresholds.items():
            th = ths[0]
            if profile == "strict":
                lo = None if th.lo is None else th.lo / tighten
                hi = None if th.hi is None else th.hi * tighten
                if lo is not None and hi is not None and lo >= hi:
                    lo, hi = th.lo, th.hi
            else:
                lo, hi = th.lo, th.hi
            report["thresholds"][mid] = {"lo": lo, "hi": hi}
        self.profile = profile
        return self.fuse_offline(report)

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ts", "metric_id", "value", "ewma_mean", "z", "score"])
            for row in self.rows:
                w.writerow(row)
