"""Choosing login / purchase churn windows from false-churner and missed-sales rates."""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, timedelta
from typing import NamedTuple, Sequence

import numpy as np

from .events import Cohort, activity_bitmap, add_months, gaps_from_bitmap, leading_months

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(range(3, 91))
DEFAULT_MAX_FALSE = 0.05
DEFAULT_MAX_MISSED = 0.01
DRIFT_WARN_RATE = 0.10


class ChurnRate(NamedTuple):
    rate: float
    churners: int
    false_churners: int

    @property
    def no_churners(self) -> bool:
        return self.churners == 0


class MissedSales(NamedTuple):
    rate: float
    missed_cents: int
    total_cents: int


class CalibrationPoint(NamedTuple):
    window: int
    false_churner_pct: float
    missed_sales_pct: float


@dataclass(frozen=True)
class CalibrationCurve:
    kind: str
    points: tuple[CalibrationPoint, ...]

    def __post_init__(self):
        windows = [p.window for p in self.points]
        if any(b <= a for a, b in zip(windows, windows[1:])):
            raise ValueError("calibration windows must be strictly increasing")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["window", "false_churner_pct", "missed_sales_pct"])
            for p in self.points:
                writer.writerow([p.window, repr(p.false_churner_pct), repr(p.missed_sales_pct)])


@dataclass(frozen=True)
class ChurnDefinition:
    login_window: int
    purchase_window: int
    thresholds_used: tuple[float, float] = (DEFAULT_MAX_FALSE, DEFAULT_MAX_MISSED)
    calibration_window: tuple[date, date] | None = None

    def __post_init__(self):
        if self.login_window < 1:
            raise ValueError("login_window must be >= 1")
        if self.purchase_window < self.login_window:
            warnings.warn(
                f"purchase_window {self.purchase_window} < login_window {self.login_window}: "
                "login churners would not always be purchase churners",
                stacklevel=2,
            )


class NoFeasibleWindow(ValueError):
    """No grid window meets both thresholds; ``curve`` holds every evaluated point."""

    def __init__(self, message: str, curve: CalibrationCurve):
        super().__init__(message)
        self.curve = curve


class GapTable:
    """All qualifying inactivity gaps of a cohort, flattened for fast window scans.

    Rows are ordered by player, then by gap start. ``suffix_spend`` is the
    player's spend from the gap's return day to the end of the data.
    """

    def __init__(self, cohort: Cohort, kind: str):
        players, lengths, resolved, suffix = [], [], [], []
        for p_idx, tl in enumerate(cohort):
            bitmap = activity_bitmap(tl, kind)
            starts, gap_len, res = gaps_from_bitmap(bitmap)
            if len(starts) == 0:
                continue
            spend = tl.daily.spend_cents
            tail = np.concatenate([np.cumsum(spend[::-1])[::-1], [0]])
            returns = starts + gap_len
            players.append(np.full(len(starts), p_idx))
            lengths.append(gap_len)
            resolved.append(res)
            suffix.append(np.where(res, tail[np.minimum(returns, len(spend))], 0))
        cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dtype=dt)
        self.kind = kind
        self.player = cat(players, np.int64)
        self.length = cat(lengths, np.int64)
        self.resolved = cat(resolved, bool)
        self.suffix_spend = cat(suffix, np.int64)
        self.total_cents = cohort.total_spend_cents()

    def counts(self, window: int, exclude_returns_at_least: int | None = None) -> tuple[int, int, int]:
        """``(churners, false_churners, missed_cents)`` for one window length."""
        over = self.length > window
        churners = len(np.unique(self.player[over]))
        false_mask = over & self.resolved
        if exclude_returns_at_least is not None:
            false_mask &= self.length < exclude_returns_at_least
        fp, first = np.unique(self.player[false_mask], return_index=True)
        missed = int(self.suffix_spend[false_mask][first].sum())
        return churners, len(fp), missed


def _check_kind(kind: str) -> None:
    if kind not in ("login", "purchase"):
        raise ValueError(f"kind must be 'login' or 'purchase', got {kind!r}")


def false_churner_rate(
    cohort: Cohort, window: int, kind: str = "login", *, exclude_returns_at_least: int | None = None
) -> ChurnRate:
    """Share of churners under ``window`` that later return within the data.

    A churner has some gap longer than ``window`` days; they are false churners
    when at least one such gap is resolved. ``exclude_returns_at_least`` drops
    returns after long gaps (resurrections) from the numerator.
    """
    _check_kind(kind)
    if window < 1:
        raise ValueError("window must be >= 1")
    churners, false, _ = GapTable(cohort, kind).counts(window, exclude_returns_at_least)
    return ChurnRate(false / churners if churners else 0.0, churners, false)


def missed_sales_rate(cohort: Cohort, window: int, kind: str = "login") -> MissedSales:
    """Share of revenue spent by false churners from their first qualifying return onward."""
    _check_kind(kind)
    if window < 1:
        raise ValueError("window must be >= 1")
    table = GapTable(cohort, kind)
    if table.total_cents == 0:
        raise ValueError("no revenue")
    _, _, missed = table.counts(window)
    return MissedSales(missed / table.total_cents, missed, table.total_cents)


def calibration_curve(cohort: Cohort, grid: Sequence[int], kind: str = "login", *, workers: int = 1):
    """Curve points plus raw counts ``(churners, false, missed_cents)`` per window."""
    _check_kind(kind)
    grid = [int(w) for w in grid]
    if not grid:
        raise ValueError("grid must not be empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly ascending")
    if grid[0] < 1:
        raise ValueError("grid windows must be >= 1")
    table = GapTable(cohort, kind)
    if table.total_cents == 0:
        raise ValueError("no revenue")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            counts = list(pool.map(table.counts, grid))
    else:
        counts = [table.counts(w) for w in grid]

    for (c0, f0, m0), (c1, f1, m1), w in zip(counts, counts[1:], grid[1:]):
        if c1 > c0 or f1 > f0 or m1 > m0:
            raise RuntimeError(f"non-monotone churn counts at window {w}")

    points = tuple(
        CalibrationPoint(w, f / c if c else 0.0, m / table.total_cents) for w, (c, f, m) in zip(grid, counts)
    )
    return CalibrationCurve(kind, points), counts


def calibrate_window(
    cohort: Cohort,
    grid: Sequence[int] = DEFAULT_GRID,
    max_false: float = DEFAULT_MAX_FALSE,
    max_missed: float = DEFAULT_MAX_MISSED,
    kind: str = "login",
    *,
    workers: int = 1,
) -> tuple[int, CalibrationCurve]:
    """Shortest grid window with false churners below ``max_false`` and missed sales below ``max_missed``."""
    curve, _ = calibration_curve(cohort, grid, kind, workers=workers)
    for p in curve.points:
        if p.false_churner_pct < max_false and p.missed_sales_pct < max_missed:
            return p.window, curve
    raise NoFeasibleWindow(
        f"no {kind} window in [{curve.points[0].window}, {curve.points[-1].window}] keeps false churners "
        f"under {max_false:g} and missed sales under {max_missed:g}",
        curve,
    )


def calibration_cohort(cohort: Cohort, months: int = 2) -> Cohort:
    """The first ``months`` calendar months of ``cohort``."""
    return cohort.restrict(*leading_months(cohort, months))


def calibrate_definition(
    cohort: Cohort,
    grid: Sequence[int] = DEFAULT_GRID,
    max_false: float = DEFAULT_MAX_FALSE,
    max_missed: float = DEFAULT_MAX_MISSED,
    *,
    months: int | None = 2,
    purchase_months: int | None = None,
) -> ChurnDefinition:
    """Calibrate both windows; ``months=None`` uses the whole cohort.

    Purchase windows are long, so ``purchase_months`` may ask for a longer sample.
    """
    login_data = calibration_cohort(cohort, months) if months else cohort
    pm = purchase_months if purchase_months is not None else months
    purchase_data = calibration_cohort(cohort, pm) if pm else cohort
    login, _ = calibrate_window(login_data, grid, max_false, max_missed, "login")
    purchase, _ = calibrate_window(purchase_data, grid, max_false, max_missed, "purchase")
    return ChurnDefinition(login, purchase, (max_false, max_missed), login_data.period)


def drift_check(
    cohort: Cohort, window: int, kind: str = "login", span_months: int = 6, step_months: int = 6
) -> list[tuple[date, float]]:
    """False-churner rate of ``window`` over successive spans; warns when a span exceeds 10%."""
    out = []
    start = cohort.period[0]
    while True:
        end = add_months(start, span_months) - timedelta(days=1)
        if end > cohort.period[1]:
            break
        sub = cohort.restrict(start, end)
        rate = false_churner_rate(sub, window, kind).rate if len(sub) else 0.0
        if rate > DRIFT_WARN_RATE:
            log.warning("false-churner rate %.3f for window %d over %s..%s exceeds %.0f%%",
                        rate, window, start, end, 100 * DRIFT_WARN_RATE)
        out.append((start, rate))
        start = add_months(start, step_months)
    return out
