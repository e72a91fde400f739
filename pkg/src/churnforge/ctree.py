"""Conditional inference trees with permutation-test variable selection.

Each node computes response scores (the 0/1 label for classification,
log-rank scores for censored survival), tests every candidate feature for
independence with a standardised linear statistic, Bonferroni-adjusts the
p-values over the tested features and, if the best adjusted p-value is at
most ``alpha``, splits that feature at the midpoint maximising the two-sample
statistic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

from .survival import event_table


class TestResult(NamedTuple):
    statistic: float
    p_value: float


def logrank_scores(times, events) -> np.ndarray:
    """Event indicator minus Nelson-Aalen cumulative hazard at each observed time."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    if len(times) == 0:
        raise ValueError("logrank_scores needs at least one sample")
    t, n, d = event_table(times, events)
    hazard = np.cumsum(d / n)
    return events - hazard[np.searchsorted(t, times)]


@lru_cache(maxsize=16)
def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int8)


def _exact_p(x: np.ndarray, h: np.ndarray, mu: float, t_obs: float) -> float:
    perms = _permutations(len(x))
    t_all = h[perms] @ x
    dev = abs(t_obs - mu)
    tol = 1e-9 * max(1.0, dev)
    return float(np.mean(np.abs(t_all - mu) >= dev - tol))


def node_test(x, h, weights=None, *, exact_threshold: int = 8) -> TestResult:
    """Permutation test of independence between covariate ``x`` and scores ``h``.

    The linear statistic ``T = sum(w * x * h)`` is standardised with its
    conditional permutation mean and variance. For at most
    ``exact_threshold`` (weighted) observations the p-value is the exact
    two-sided tail of the full permutation distribution; otherwise the
    asymptotic normal tail. Integer weights act as replication counts.
    """
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        keep = w > 0
        x, h, w = x[keep], h[keep], w[keep]
    else:
        w = np.ones(len(x))
    n = w.sum()
    if n < 2:
        return TestResult(0.0, 1.0)
    h_bar = (w * h).sum() / n
    x_bar = (w * x).sum() / n
    var_h = (w * (h - h_bar) ** 2).sum() / n
    ss_x = (w * (x - x_bar) ** 2).sum()
    if var_h <= 1e-14 * max(1.0, h_bar**2) or ss_x <= 1e-14 * max(1.0, (w * x * x).sum()):
        return TestResult(0.0, 1.0)
    t_obs = (w * x * h).sum()
    mu = (w * x).sum() * h_bar
    sigma = math.sqrt(var_h * n / (n - 1) * ss_x)
    c = abs(t_obs - mu) / sigma
    if n <= exact_threshold:
        if not np.allclose(w, np.round(w)):
            raise ValueError("exact permutation test needs integer weights")
        reps = np.round(w).astype(int)
        p = _exact_p(np.repeat(x, reps), np.repeat(h, reps), mu, t_obs)
        return TestResult(c, p)
    return TestResult(c, float(2.0 * ndtr(-c)))


def _screen(xs: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Asymptotic statistics and p-values of every column of ``xs`` against ``h``."""
    n = len(h)
    hc = h - h.mean()
    var_h = (hc * hc).sum() / n
    xc = xs - xs.mean(axis=0)
    ss_x = (xc * xc).sum(axis=0)
    scale = np.maximum(1.0, (xs * xs).sum(axis=0))
    ok = (ss_x > 1e-14 * scale) & (var_h > 1e-14 * max(1.0, h.mean() ** 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.abs(xc.T @ h) / np.sqrt(var_h * n / (n - 1) * ss_x)
    c = np.where(ok, c, 0.0)
    p = np.where(ok, 2.0 * ndtr(-c), 1.0)
    return c, p


def best_cut(x: np.ndarray, h: np.ndarray, min_bucket: int = 1) -> tuple[float, float] | None:
    """Midpoint cut maximising the standardised two-sample statistic.

    Returns ``(cut, statistic)`` with left child ``x <= cut``, or ``None``
    when no cut leaves ``min_bucket`` rows on both sides.
    """
    n = len(x)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    hs = h[order]
    h_bar = hs.mean()
    var_h = ((hs - h_bar) ** 2).sum() / n
    m = np.arange(1, n)
    valid = (xs[1:] > xs[:-1]) & (m >= min_bucket) & (n - m >= min_bucket)
    if not valid.any():
        return None
    if var_h <= 0:
        k = int(np.flatnonzero(valid)[0])
        return float((xs[k] + xs[k + 1]) / 2), 0.0
    s = np.cumsum(hs)[:-1]
    stat = np.abs(s - m * h_bar) / np.sqrt(var_h * n / (n - 1) * m * (1 - m / n))
    stat = np.where(valid, stat, -np.inf)
    k = int(np.argmax(stat))
    return float((xs[k] + xs[k + 1]) / 2), float(stat[k])


class BinaryResponse:
    survival = False

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=float)
        if not np.isin(self.labels, (0.0, 1.0)).all():
            raise ValueError("binary labels must be 0 or 1")

    def __len__(self):
        return len(self.labels)

    def scores(self, idx: np.ndarray) -> np.ndarray:
        return self.labels[idx]


class SurvivalResponse:
    survival = True

    def __init__(self, times, events):
        self.times = np.asarray(times, dtype=float)
        self.events = np.asarray(events, dtype=bool)
        if len(self.times) != len(self.events):
            raise ValueError("times and events differ in length")

    def __len__(self):
        return len(self.times)

    def scores(self, idx: np.ndarray) -> np.ndarray:
        return logrank_scores(self.times[idx], self.events[idx])


@dataclass(frozen=True)
class TreeParams:
    alpha: float = 0.05
    mtry: int | None = None  # None: all features
    min_node: int = 20
    min_bucket: int = 7
    exact_threshold: int = 8
    max_depth: int | None = None


@dataclass
class Tree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf.

    ``leaf_members[node]`` are the training-row ids that reached the leaf.
    """

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    p_value: list[float] = field(default_factory=list)
    leaf_members: dict[int, np.ndarray] = field(default_factory=dict)

    def _add(self) -> int:
        for a, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1), (self.p_value, 1.0)):
            a.append(v)
        return len(self.feature) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_members)

    def _arrays(self):
        cache = getattr(self, "_cache", None)
        if cache is None or len(cache[0]) != len(self.feature):
            cache = (
                np.asarray(self.feature, dtype=np.int64),
                np.asarray(self.threshold, dtype=float),
                np.asarray(self.left, dtype=np.int64),
                np.asarray(self.right, dtype=np.int64),
            )
            self._cache = cache
        return cache

    def apply(self, X) -> np.ndarray:
        """Leaf node id reached by each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        feature, threshold, left, right = self._arrays()
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = feature[node]
            inner = np.flatnonzero(f >= 0)
            if len(inner) == 0:
                return node
            cur = node[inner]
            go_left = X[inner, f[inner]] <= threshold[cur]
            node[inner] = np.where(go_left, left[cur], right[cur])

    def to_dict(self) -> dict:
        return {
            "feature": list(map(int, self.feature)),
            "threshold": list(map(float, self.threshold)),
            "left": list(map(int, self.left)),
            "right": list(map(int, self.right)),
            "p_value": list(map(float, self.p_value)),
            "leaf_members": {str(k): v.tolist() for k, v in sorted(self.leaf_members.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Tree":
        return cls(
            feature=list(data["feature"]),
            threshold=list(data["threshold"]),
            left=list(data["left"]),
            right=list(data["right"]),
            p_value=list(data["p_value"]),
            leaf_members={int(k): np.asarray(v, dtype=np.int64) for k, v in data["leaf_members"].items()},
        )


def choose_split(X, h, params: TreeParams, features: np.ndarray):
    """``(feature, cut, adjusted_p)`` for a node, or ``None`` when it should be a leaf."""
    n = len(h)
    xs = X[:, features]
    if n <= params.exact_threshold:
        results = [node_test(xs[:, k], h, exact_threshold=params.exact_threshold) for k in range(len(features))]
        c = np.array([r.statistic for r in results])
        p = np.array([r.p_value for r in results])
    else:
        c, p = _screen(xs, h)
    m = len(features)
    p_adj = np.minimum(1.0, m * p)
    # smallest adjusted p; larger statistic breaks p ties (underflow), then lower feature index
    order = np.lexsort((features, -c, p_adj))
    best = order[0]
    if params.alpha <= 0 or p_adj[best] > params.alpha or c[best] <= 0:
        return None
    cut = best_cut(xs[:, best], h, params.min_bucket)
    if cut is None:
        return None
    return int(features[best]), cut[0], float(p_adj[best])


def fit_ctree(X, response, params: TreeParams = TreeParams(), rng=None, rows=None, *, mtry: int | None = None) -> Tree:
    """Grow one conditional inference tree on ``rows`` of ``X``.

    ``response`` is a :class:`BinaryResponse` or :class:`SurvivalResponse`.
    ``rng`` draws the ``mtry`` candidate features per node; without it all
    features are tested.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("empty training data")
    if len(response) != len(X):
        raise ValueError("response and features differ in length")
    n_features = X.shape[1]
    mtry = mtry or params.mtry or n_features
    mtry = min(mtry, n_features)
    rows = np.arange(len(X)) if rows is None else np.asarray(rows, dtype=np.int64)
    if len(rows) == 0:
        raise ValueError("empty training data")

    tree = Tree()
    stack = [(tree._add(), rows, 0)]
    while stack:
        node, idx, depth = stack.pop()
        split = None
        if len(idx) >= params.min_node and (params.max_depth is None or depth < params.max_depth):
            if mtry < n_features and rng is not None:
                features = np.sort(rng.choice(n_features, size=mtry, replace=False))
            else:
                features = np.arange(n_features)
            split = choose_split(X[idx], response.scores(idx), params, features)
        if split is None:
            tree.leaf_members[node] = np.sort(idx)
            continue
        f, cut, p_adj = split
        go_left = X[idx, f] <= cut
        left, right = tree._add(), tree._add()
        tree.feature[node], tree.threshold[node] = f, cut
        tree.left[node], tree.right[node], tree.p_value[node] = left, right, p_adj
        # right pushed first so the left subtree is numbered first
        stack.append((right, idx[~go_left], depth + 1))
        stack.append((left, idx[go_left], depth + 1))
    return tree
