"""Kaplan-Meier and Nelson-Aalen estimation on lifetime, level and playtime axes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date
from typing import Callable, Iterable, Sequence

import numpy as np

from .events import Cohort
from .profiling import STRATUM_PRIORITY, StateTimeline, stratum_of

AXES = ("lifetime", "level", "playtime")
KINDS = ("login", "purchase")
Z_95 = 1.959963984540054

_LOGIN_EPISODES = ("churn", "resurrection")
_PURCHASE_EPISODES = ("purchase_churn", "purchase_resurrection")


@dataclass(frozen=True)
class SurvivalSample:
    player_id: str
    axis: str
    time: float
    event: bool
    kind: str = "login"

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("survival time must be >= 0")


def as_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    """``(times, events)`` from a sequence of samples or an already split pair."""
    if isinstance(samples, tuple) and len(samples) == 2 and not isinstance(samples[0], SurvivalSample):
        times, events = samples
        return np.asarray(times, dtype=float), np.asarray(events, dtype=bool)
    samples = list(samples)
    return (
        np.array([s.time for s in samples], dtype=float),
        np.array([s.event for s in samples], dtype=bool),
    )


def event_table(times, events, weights=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct times with (weighted) numbers at risk and events.

    At tied times events are counted before censorings: everyone with
    ``T >= t`` is at risk at ``t``.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    w = np.ones(len(times)) if weights is None else np.asarray(weights, dtype=float)
    uniq, inv = np.unique(times, return_inverse=True)
    total = np.bincount(inv, weights=w, minlength=len(uniq))
    d = np.bincount(inv, weights=w * events, minlength=len(uniq))
    at_risk = np.cumsum(total[::-1])[::-1]
    return uniq, at_risk, d


@dataclass(frozen=True)
class SurvivalCurve:
    """Right-continuous step function with pointwise 95% log-log bands."""

    t: np.ndarray
    surv: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n_at_risk: np.ndarray
    n_events: np.ndarray
    estimator: str = "KM"

    def __call__(self, times) -> np.ndarray:
        return self.at(times)

    def at(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        idx = np.searchsorted(self.t, times, side="right") - 1
        return np.where(idx >= 0, self.surv[np.maximum(idx, 0)], 1.0)

    def __len__(self) -> int:
        return len(self.t)

    def rows(self):
        for row in zip(self.t, self.surv, self.ci_low, self.ci_high, self.n_at_risk, self.n_events):
            yield tuple(float(v) for v in row[:4]) + (int(row[4]), int(row[5]))


def kaplan_meier(samples, *, alpha_z: float = Z_95) -> SurvivalCurve:
    """Product-limit estimate with Greenwood variance and log-log confidence limits.

    A ``(0, 1)`` origin row is prepended when the first observed time is after 0.
    """
    times, events = as_arrays(samples)
    if len(times) == 0:
        raise ValueError("kaplan_meier needs at least one sample")
    t, n, d = event_table(times, events)
    surv = np.cumprod(1.0 - d / n)
    with np.errstate(divide="ignore", invalid="ignore"):
        green = np.cumsum(np.where(d > 0, d / (n * (n - d)), 0.0))
        log_s = np.log(surv)
        se = np.sqrt(green) / np.abs(log_s)
        lo = surv ** np.exp(alpha_z * se)
        hi = surv ** np.exp(-alpha_z * se)
    inner = (surv > 0) & (surv < 1) & np.isfinite(se)
    lo = np.where(inner, lo, surv)
    hi = np.where(inner, hi, surv)
    n_i, d_i = n.astype(np.int64), d.astype(np.int64)
    if t[0] > 0:
        t = np.concatenate([[0.0], t])
        surv, lo, hi = (np.concatenate([[1.0], a]) for a in (surv, lo, hi))
        n_i = np.concatenate([[len(times)], n_i])
        d_i = np.concatenate([[0], d_i])
    return SurvivalCurve(t, surv, np.clip(lo, 0, 1), np.clip(hi, 0, 1), n_i, d_i)


@dataclass(frozen=True)
class CumulativeHazard:
    t: np.ndarray
    hazard: np.ndarray
    n_at_risk: np.ndarray
    n_events: np.ndarray

    def at(self, times) -> np.ndarray:
        idx = np.searchsorted(self.t, np.asarray(times, dtype=float), side="right") - 1
        return np.where(idx >= 0, self.hazard[np.maximum(idx, 0)], 0.0)


def nelson_aalen(samples) -> CumulativeHazard:
    times, events = as_arrays(samples)
    if len(times) == 0:
        raise ValueError("nelson_aalen needs at least one sample")
    t, n, d = event_table(times, events)
    return CumulativeHazard(t, np.cumsum(d / n), n, d)


# ---------------------------------------------------------------------------
# cohort -> samples


def _axis_values(daily, offset: int) -> dict[str, float]:
    return {
        "lifetime": float(offset),
        "level": float(daily.level[offset]),
        "playtime": float(daily.playtime[: offset + 1].sum()) / 3600.0,
    }


def first_churn(state: StateTimeline, kind: str, cutoff: date):
    """The first surviving churn episode of ``kind`` detected on or before ``cutoff``."""
    kinds = _LOGIN_EPISODES if kind == "login" else _PURCHASE_EPISODES
    for ep in state.episodes:
        if ep.kind in kinds and ep.detected <= cutoff:
            return ep
    return None


def to_survival_samples(
    cohort: Cohort,
    states: dict[str, StateTimeline],
    axis: str,
    kind: str,
    cutoff: date | None = None,
) -> list[SurvivalSample]:
    """Time to first churn of ``kind`` on ``axis`` for every player born by ``cutoff``.

    Genuine false churns are skipped; players with no churn detected by
    ``cutoff`` are censored at their axis value on ``cutoff``. Players who
    never paid are left out of purchase samples.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    cutoff = cutoff or cohort.period[1]
    if cutoff > cohort.period[1]:
        raise ValueError("cutoff after the end of the data")
    out = []
    for tl in cohort:
        if tl.first_login > cutoff:
            continue
        c_off = cutoff.toordinal() - tl.start
        daily = tl.daily
        if kind == "purchase" and not daily.paid[: c_off + 1].any():
            continue
        ep = first_churn(states[tl.player_id], kind, cutoff)
        if ep is not None:
            values = _axis_values(daily, ep.start.toordinal() - tl.start)
            out.append(SurvivalSample(tl.player_id, axis, values[axis], True, kind))
        else:
            values = _axis_values(daily, c_off)
            out.append(SurvivalSample(tl.player_id, axis, values[axis], False, kind))
    if not out:
        raise ValueError(f"no {kind} survival samples in cohort")
    return out


@dataclass(frozen=True)
class StratumCurve:
    stratum: str
    curve: SurvivalCurve
    n: int
    low_confidence: bool


def km_stratified(
    cohort: Cohort,
    states: dict[str, StateTimeline],
    axis: str,
    kind: str,
    cutoff: date | None = None,
    strata: Callable[[StateTimeline], str] | None = None,
    *,
    min_stratum_size: int = 10,
) -> dict[str, StratumCurve]:
    """One Kaplan-Meier curve per churner type.

    By default each player joins one stratum by the priority
    p_resurrected > resurrected > zombie > normal over labels held by ``cutoff``.
    """
    cutoff = cutoff or cohort.period[1]
    samples = to_survival_samples(cohort, states, axis, kind, cutoff)
    if strata is None:
        strata = lambda st: stratum_of(st.labels_as_of(cutoff))
    groups: dict[str, list[SurvivalSample]] = {}
    for s in samples:
        groups.setdefault(strata(states[s.player_id]), []).append(s)
    order = {name: i for i, name in enumerate(STRATUM_PRIORITY)}
    out = {}
    for name in sorted(groups, key=lambda g: (order.get(g, len(order)), g)):
        members = groups[name]
        out[name] = StratumCurve(name, kaplan_meier(members), len(members), len(members) < min_stratum_size)
    return out


def write_km_csv(curves: dict[str, StratumCurve] | SurvivalCurve, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["t", "S", "ci_low", "ci_high", "n_risk", "n_event", "stratum"])
    if isinstance(curves, SurvivalCurve):
        curves = {"all": StratumCurve("all", curves, int(curves.n_at_risk[0]), False)}
    for name, sc in curves.items():
        for t, s, lo, hi, n, d in sc.curve.rows():
            writer.writerow([repr(t), repr(s), repr(lo), repr(hi), n, d, name])
