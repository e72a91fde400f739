"""Conditional inference ensembles with nearest-neighbour weighted predictions."""

from __future__ import annotations

import gzip
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ctree import BinaryResponse, SurvivalResponse, Tree, TreeParams, fit_ctree

MODEL_FORMAT = "churnforge-forest"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    ensemble_size: int = 1000
    alpha: float = 0.05
    mtry: int | None = None  # None: ceil(sqrt(n_features))
    min_node: int = 20
    min_bucket: int = 7
    subsample: float = 0.632
    exact_threshold: int = 8
    max_depth: int | None = None

    def tree_params(self) -> TreeParams:
        return TreeParams(self.alpha, self.mtry, self.min_node, self.min_bucket, self.exact_threshold, self.max_depth)

    def resolved_mtry(self, n_features: int) -> int:
        return min(n_features, self.mtry or math.ceil(math.sqrt(n_features)))

    @classmethod
    def single_tree(cls, **kw) -> "ForestParams":
        """A lone conditional inference tree on all rows and all features."""
        return cls(ensemble_size=1, subsample=1.0, mtry=10**9, **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "ForestParams":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise KeyError(unknown[0])
        return cls(**data)


@dataclass
class Forest:
    trees: list[Tree]
    subsamples: list[np.ndarray]
    params: ForestParams
    seed: int
    survival: bool
    # training responses: (times, events) or labels
    times: np.ndarray | None = None
    events: np.ndarray | None = None
    labels: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return len(self.times) if self.survival else len(self.labels)

    def to_dict(self) -> dict:
        out = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "seed": int(self.seed),
            "survival": self.survival,
            "params": asdict(self.params),
            "feature_names": list(self.feature_names),
            "meta": self.meta,
            "trees": [t.to_dict() for t in self.trees],
            "subsamples": [s.tolist() for s in self.subsamples],
        }
        if self.survival:
            out["times"] = [float(t) for t in self.times]
            out["events"] = [bool(e) for e in self.events]
        else:
            out["labels"] = [int(v) for v in self.labels]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Forest":
        if data.get("format") != MODEL_FORMAT:
            raise ValueError("not a churnforge forest model")
        if data.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {data.get('version')!r}")
        survival = bool(data["survival"])
        return cls(
            trees=[Tree.from_dict(t) for t in data["trees"]],
            subsamples=[np.asarray(s, dtype=np.int64) for s in data["subsamples"]],
            params=ForestParams.from_dict(data["params"]),
            seed=int(data["seed"]),
            survival=survival,
            times=np.asarray(data["times"], dtype=float) if survival else None,
            events=np.asarray(data["events"], dtype=bool) if survival else None,
            labels=None if survival else np.asarray(data["labels"], dtype=float),
            feature_names=tuple(data.get("feature_names", ())),
            meta=data.get("meta", {}),
        )

    def save(self, path) -> None:
        """JSON for ``.json`` paths, otherwise gzip-compressed JSON (deterministic bytes)."""
        path = Path(path)
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        if path.suffix == ".json":
            path.write_bytes(payload)
        else:
            with open(path, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0, filename="") as gz:
                gz.write(payload)

    @classmethod
    def load(cls, path) -> "Forest":
        raw = Path(path).read_bytes()
        if raw[:2] == b"\x1f\x8b":
            raw = gzip.decompress(raw)
        return cls.from_dict(json.loads(raw))


def tree_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _fit_one(X, response, params: ForestParams, seed: int, index: int):
    n = len(X)
    rng = tree_rng(seed, index)
    size = n if params.subsample >= 1 else int(round(params.subsample * n))
    rows = np.arange(n) if size == n else np.sort(rng.choice(n, size=size, replace=False))
    mtry = params.resolved_mtry(X.shape[1])
    tree = fit_ctree(X, response, params.tree_params(), rng, rows, mtry=mtry)
    return tree, rows


_SHARED: dict = {}


def _init_worker(X, response, params, seed):
    _SHARED.update(X=X, response=response, params=params, seed=seed)


def _fit_chunk(indices):
    s = _SHARED
    return [_fit_one(s["X"], s["response"], s["params"], s["seed"], i) for i in indices]


def fit_forest(X, response, params: ForestParams = ForestParams(), seed: int = 0, *, workers: int = 1,
               feature_names=()) -> Forest:
    """Fit ``params.ensemble_size`` trees, tree ``t`` drawing from the RNG stream ``(seed, t)``.

    The result does not depend on ``workers``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("empty training data")
    if params.ensemble_size < 1:
        raise ValueError("ensemble_size must be >= 1")
    size = len(X) if params.subsample >= 1 else int(round(params.subsample * len(X)))
    if size < params.min_node:
        raise ValueError(f"subsample of {size} rows is smaller than min_node={params.min_node}")
    indices = list(range(params.ensemble_size))
    if workers > 1 and len(indices) > 1:
        chunks = [indices[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(X, response, params, seed)) as pool:
            results = {}
            for chunk, fitted in zip(chunks, pool.map(_fit_chunk, chunks)):
                results.update(zip(chunk, fitted))
        fitted = [results[i] for i in indices]
    else:
        fitted = [_fit_one(X, response, params, seed, i) for i in indices]
    return Forest(
        trees=[t for t, _ in fitted],
        subsamples=[r for _, r in fitted],
        params=params,
        seed=int(seed),
        survival=response.survival,
        times=response.times if response.survival else None,
        events=response.events if response.survival else None,
        labels=None if response.survival else response.labels,
        feature_names=tuple(feature_names),
    )


def forest_weights(forest: Forest, X) -> np.ndarray:
    """``W[k, i] = sum over trees of 1[row i shares x_k's leaf] / leaf size``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    W = np.zeros((len(X), forest.n_train))
    for tree in forest.trees:
        leaves = tree.apply(X)
        for leaf in np.unique(leaves):
            members = tree.leaf_members[int(leaf)]
            rows = np.flatnonzero(leaves == leaf)
            W[np.ix_(rows, members)] += 1.0 / len(members)
    return W


def weighted_km(times, events, W, grid) -> np.ndarray:
    """Weighted product-limit estimates, one row per weight vector, evaluated on ``grid``."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    W = np.atleast_2d(W)
    order = np.argsort(times, kind="stable")
    t_sorted = times[order]
    uniq, starts = np.unique(t_sorted, return_index=True)
    Ws = W[:, order]
    tot = np.add.reduceat(Ws, starts, axis=1)
    d = np.add.reduceat(Ws * events[order], starts, axis=1)
    at_risk = np.cumsum(tot[:, ::-1], axis=1)[:, ::-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(at_risk > 0, 1.0 - d / at_risk, 1.0)
    surv = np.cumprod(np.clip(factor, 0.0, 1.0), axis=1)
    idx = np.searchsorted(uniq, np.asarray(grid, dtype=float), side="right") - 1
    out = np.where(idx >= 0, surv[:, np.maximum(idx, 0)], 1.0)
    return out


def predict_survival(forest: Forest, X, grid) -> np.ndarray:
    """Survival probabilities on ``grid`` for each row of ``X`` (shape ``(len(X), len(grid))``)."""
    if not forest.survival:
        raise ValueError("predict_survival needs a survival forest")
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be ascending")
    return weighted_km(forest.times, forest.events, forest_weights(forest, X), grid)


def predict_probability(forest: Forest, X) -> np.ndarray:
    """Weighted share of class-1 training rows among each row's forest neighbours."""
    if forest.survival:
        raise ValueError("predict_probability needs a binary forest")
    W = forest_weights(forest, X)
    return (W @ forest.labels) / W.sum(axis=1)
