"""Game-independent player features computed from a timeline prefix."""

from __future__ import annotations

from datetime import date
from typing import NamedTuple, Sequence

import numpy as np

from .events import PlayerTimeline


class FeatureVector(NamedTuple):
    age_days: float
    cumulative_playtime_h: float
    playtime_7d: float
    playtime_30d: float
    sessions_7d: float
    sessions_30d: float
    mean_session_gap_30d: float
    days_since_last_session: float
    level: float
    levelups_30d: float
    cumulative_spend: float
    spend_30d: float
    purchases_30d: float
    days_since_last_purchase: float
    purchase_count_total: float
    actions_per_day_30d: float


FEATURE_NAMES = FeatureVector._fields
TYPE_FLAG_NAMES = ("is_zombie", "is_resurrected", "is_p_resurrected")


def build_features(timeline: PlayerTimeline, as_of: date) -> FeatureVector:
    """Features as of the end of ``as_of``; later records are never read.

    Trailing windows cover ``(as_of - w, as_of]``. Playtime is in hours,
    spend in currency units. ``days_since_*`` are capped at the player's age.
    """
    age = as_of.toordinal() - timeline.start
    if age < 0:
        raise ValueError(f"as_of {as_of} is before first login of player {timeline.player_id}")
    daily = timeline.daily
    a = min(age, len(daily) - 1)
    span = slice(0, a + 1)
    pt = daily.playtime[span]
    sess = daily.sessions[span]
    lvl_up = daily.levelups[span]
    purch = daily.purchases[span]
    spend = daily.spend_cents[span]
    active = np.flatnonzero(daily.active[span])
    paid = np.flatnonzero(daily.paid[span])

    w7 = slice(max(0, age - 6), a + 1)
    w30 = slice(max(0, age - 29), a + 1)
    lo30 = max(0, age - 29)
    days_in_30 = min(30, age + 1)

    recent = active[active >= lo30]
    gap = float(np.diff(recent).mean()) if len(recent) >= 2 else float(days_in_30)

    return FeatureVector(
        age_days=float(age),
        cumulative_playtime_h=pt.sum() / 3600.0,
        playtime_7d=pt[w7].sum() / 3600.0,
        playtime_30d=pt[w30].sum() / 3600.0,
        sessions_7d=float(sess[w7].sum()),
        sessions_30d=float(sess[w30].sum()),
        mean_session_gap_30d=gap,
        days_since_last_session=float(age - active[-1]),
        level=float(daily.level[a]),
        levelups_30d=float(lvl_up[w30].sum()),
        cumulative_spend=spend.sum() / 100.0,
        spend_30d=spend[w30].sum() / 100.0,
        purchases_30d=float(purch[w30].sum()),
        days_since_last_purchase=float(age - paid[-1]) if len(paid) else float(age),
        purchase_count_total=float(purch.sum()),
        actions_per_day_30d=float(sess[w30].sum() + lvl_up[w30].sum() + purch[w30].sum()) / days_in_30,
    )


def type_flags(labels) -> tuple[float, float, float]:
    labels = set(labels)
    return tuple(float(name in labels) for name in ("zombie", "resurrected", "p_resurrected"))


def feature_matrix(
    timelines: Sequence[PlayerTimeline], as_of: date, flags: Sequence[Sequence[str]] | None = None
) -> np.ndarray:
    """Stack feature vectors; ``flags`` (per-player label sets) appends the type-flag columns."""
    rows = [build_features(tl, as_of) for tl in timelines]
    X = np.array(rows, dtype=float).reshape(len(rows), len(FEATURE_NAMES))
    if flags is not None:
        X = np.hstack([X, np.array([type_flags(f) for f in flags], dtype=float).reshape(len(rows), 3)])
    return X
