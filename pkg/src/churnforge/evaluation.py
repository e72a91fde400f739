"""Brier score curves with inverse probability of censoring weights, IBS and AUC."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .forest import Forest, predict_survival
from .survival import as_arrays, kaplan_meier

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CensoringDistribution:
    """Kaplan-Meier estimate of the censoring survivor function G."""

    t: np.ndarray
    surv: np.ndarray

    def at(self, times) -> np.ndarray:
        idx = np.searchsorted(self.t, np.asarray(times, dtype=float), side="right") - 1
        return np.where(idx >= 0, self.surv[np.maximum(idx, 0)], 1.0)

    def left(self, times) -> np.ndarray:
        """G(t-), the value just before ``t``."""
        idx = np.searchsorted(self.t, np.asarray(times, dtype=float), side="left") - 1
        return np.where(idx >= 0, self.surv[np.maximum(idx, 0)], 1.0)


def censoring_distribution(samples) -> CensoringDistribution:
    times, events = as_arrays(samples)
    if len(times) == 0:
        raise ValueError("censoring_distribution needs at least one sample")
    curve = kaplan_meier((times, ~events))
    return CensoringDistribution(curve.t, curve.surv)


def _inverse(g: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(g > 0, 1.0 / np.where(g > 0, g, 1.0), 0.0)


def brier_curve(grid, predictions, samples, G: CensoringDistribution | None = None, *, ipcw: bool = True):
    """BS(t) for every ``t`` in ``grid``; ``predictions[i, k]`` is S(grid[k] | x_i).

    With ``ipcw=False`` all weights are 1 (a diagnostic, biased under censoring).
    Terms whose censoring weight would divide by G = 0 are dropped.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    times, events = as_arrays(samples)
    pred = np.asarray(predictions, dtype=float).reshape(len(times), len(grid))
    if np.any(grid < 0):
        raise ValueError("evaluation times must be >= 0")
    if ipcw:
        G = G or censoring_distribution((times, events))
        w_event = _inverse(G.left(times))
        w_alive = _inverse(G.at(grid))
        if np.any(G.left(times[events]) <= 0) or np.any(G.at(grid) <= 0):
            log.warning("censoring distribution reaches 0; affected Brier terms dropped")
    else:
        w_event = np.ones(len(times))
        w_alive = np.ones(len(grid))
    died = (times[:, None] <= grid[None, :]) & events[:, None]
    alive = times[:, None] > grid[None, :]
    terms = pred**2 * died * w_event[:, None] + (1.0 - pred) ** 2 * alive * w_alive[None, :]
    return terms.mean(axis=0)


def brier_score_at(t: float, predicted, samples, G: CensoringDistribution | None = None, *, ipcw: bool = True) -> float:
    """Censoring-adjusted Brier score at a single time ``t``."""
    predicted = np.asarray(predicted, dtype=float).reshape(-1, 1)
    return float(brier_curve([t], predicted, samples, G, ipcw=ipcw)[0])


def integrated_brier(grid, bs, tau: float | None = None) -> float:
    """Trapezoidal integral of BS over ``[grid[0], tau]`` divided by its length."""
    grid = np.asarray(grid, dtype=float)
    bs = np.asarray(bs, dtype=float)
    if len(grid) < 2:
        raise ValueError("integrated Brier score needs at least 2 grid points")
    tau = float(grid[-1] if tau is None else tau)
    if not grid[0] < tau <= grid[-1]:
        raise ValueError("tau must lie inside the grid span")
    keep = grid <= tau
    g, b = grid[keep], bs[keep]
    if g[-1] < tau:
        g = np.append(g, tau)
        b = np.append(b, np.interp(tau, grid, bs))
    return float(np.trapezoid(b, g) / (tau - g[0]))


def default_tau(samples, q: float = 95.0) -> float:
    times, _ = as_arrays(samples)
    return float(np.percentile(times, q))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def evaluation_grid(tau: float, jump_times: Iterable[float] = (), n_points: int = 101) -> np.ndarray:
    """Regular grid over ``[0, tau]`` plus every jump time and a point just before it.

    BS(t) is a step function, so bracketing each jump keeps the trapezoid
    rule essentially exact.
    """
    base = np.linspace(0.0, tau, n_points)
    jumps = np.asarray([t for t in jump_times if 0 < t <= tau], dtype=float)
    eps = 1e-9 * max(1.0, tau)
    pts = np.concatenate([base, jumps, jumps - eps])
    return np.unique(pts[(pts >= 0) & (pts <= tau)])


@dataclass
class PredictionErrorCurve:
    grid: np.ndarray
    bs: np.ndarray
    ibs: float
    tau: float
    kind: str = ""
    axis: str = ""
    baselines: dict[str, tuple[np.ndarray, float]] = field(default_factory=dict)

    def to_csv(self, fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        names = sorted(self.baselines, key=lambda n: (n != "km", n))
        writer.writerow(["t", "bs"] + [f"baseline_{n}_bs" for n in names])
        for k, t in enumerate(self.grid):
            writer.writerow([repr(float(t)), repr(float(self.bs[k]))] + [repr(float(self.baselines[n][0][k])) for n in names])


def error_curves(
    forest: Forest,
    X_val,
    val_samples,
    grid: Sequence[float] | None = None,
    tau: float | None = None,
    *,
    kind: str = "",
    axis: str = "",
    ipcw: bool = True,
) -> PredictionErrorCurve:
    """Prediction error curve of ``forest`` on validation players, with two baselines.

    Baselines on the same grid: the pooled Kaplan-Meier curve of the training
    data (``km``) and a constant 0.5 survival prediction (``const``).
    """
    times, events = as_arrays(val_samples)
    if len(times) == 0:
        raise ValueError("empty validation set")
    tau = default_tau((times, events)) if tau is None else float(tau)
    if grid is None:
        if tau <= 0:
            raise ValueError("validation times give a zero integration horizon")
        jumps = np.concatenate([times, forest.times[forest.events]])
        grid = evaluation_grid(tau, jumps)
    grid = np.asarray(grid, dtype=float)
    if len(grid) < 2:
        raise ValueError("error curves need at least 2 grid points")
    G = censoring_distribution((times, events)) if ipcw else None
    bs = brier_curve(grid, predict_survival(forest, X_val, grid), (times, events), G, ipcw=ipcw)

    km = kaplan_meier((forest.times, forest.events)).at(grid)
    km_bs = brier_curve(grid, np.tile(km, (len(times), 1)), (times, events), G, ipcw=ipcw)
    const_bs = brier_curve(grid, np.full((len(times), len(grid)), 0.5), (times, events), G, ipcw=ipcw)
    return PredictionErrorCurve(
        grid=grid,
        bs=bs,
        ibs=integrated_brier(grid, bs, tau),
        tau=tau,
        kind=kind,
        axis=axis,
        baselines={
            "km": (km_bs, integrated_brier(grid, km_bs, tau)),
            "const": (const_bs, integrated_brier(grid, const_bs, tau)),
        },
    )


def cohort_hash(player_ids: Iterable[str]) -> str:
    """Stable fingerprint of a set of players."""
    digest = hashlib.sha256("\n".join(sorted(player_ids)).encode("utf-8"))
    return digest.hexdigest()[:16]


@dataclass
class EvaluationReport:
    metrics: dict[str, float]
    validation_hash: str
    n_validation: int
    exclusion_tag: str = "none"

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "validation_hash": self.validation_hash,
            "n_validation": self.n_validation,
            "exclusion_tag": self.exclusion_tag,
        }
