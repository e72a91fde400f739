"""Per-day behavioural states and churn episodes: zombies, resurrections, purchase resurrections."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from datetime import date
from typing import Iterable

import numpy as np

from .calibration import ChurnDefinition
from .events import Cohort, PlayerTimeline, gaps_from_bitmap

ACTIVE, CHURNED = 0, 1
NORMAL, ZOMBIE = 0, 1
PAYING, PURCHASE_CHURNED, NEVER_PAID = 0, 1, 2

LOGIN_STATES = ("active", "churned")
ENGAGEMENT_STATES = ("normal", "zombie")
PURCHASE_STATES = ("paying-active", "purchase-churned", "never-paid")

# ever-label names double as exclusion tags in training
SEGMENTS = ("zombie", "resurrected", "p_resurrected")

EPISODE_KINDS = (
    "churn",
    "genuine_false_churn",
    "resurrection",
    "purchase_churn",
    "genuine_false_purchase_churn",
    "purchase_resurrection",
)


@dataclass(frozen=True)
class ProfilingRules:
    login_window: int = 9
    purchase_window: int = 50
    resurrect_min_gap: int = 30
    zombie_lookback: int = 30
    zombie_max_playtime: int = 10800
    zombie_max_levelups: int = 0
    zombie_max_purchases: int = 0
    # None: every resolved purchase gap over purchase_window is a purchase resurrection
    purchase_resurrect_min_gap: int | None = None
    # zombie days need a lookback window free of churned days
    zombie_requires_active_lookback: bool = True

    def __post_init__(self):
        if self.login_window < 1 or self.purchase_window < 1:
            raise ValueError("churn windows must be >= 1")
        if self.resurrect_min_gap <= self.login_window:
            raise ValueError("resurrect_min_gap must exceed login_window")
        if self.zombie_lookback < 1:
            raise ValueError("zombie_lookback must be >= 1")
        if self.purchase_resurrect_min_gap is not None and self.purchase_resurrect_min_gap <= self.purchase_window:
            raise ValueError("purchase_resurrect_min_gap must exceed purchase_window")

    @classmethod
    def from_definition(cls, definition: ChurnDefinition, **overrides) -> "ProfilingRules":
        return cls(login_window=definition.login_window, purchase_window=definition.purchase_window, **overrides)

    @classmethod
    def from_dict(cls, data: dict) -> "ProfilingRules":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise KeyError(unknown[0])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Episode:
    kind: str
    start: date  # last qualifying activity before the gap
    end: date | None  # return day, None while open
    gap_length: int
    detected: date  # first day in churned state


@dataclass(frozen=True, eq=False)
class StateTimeline:
    """States for every day in ``[first_login, last_observed]`` as small-int arrays.

    ``ever_labels`` maps a segment name to the first date it applies; labels
    hold from that date on.
    """

    player_id: str
    first_login: date
    login: np.ndarray
    engagement: np.ndarray
    purchase: np.ndarray
    ever_label_dates: dict[str, date]
    episodes: tuple[Episode, ...]

    @property
    def ever_labels(self) -> frozenset[str]:
        return frozenset(self.ever_label_dates)

    def labels_as_of(self, as_of: date) -> frozenset[str]:
        return frozenset(k for k, d in self.ever_label_dates.items() if d <= as_of)

    def offset(self, day: date) -> int:
        i = day.toordinal() - self.first_login.toordinal()
        if not 0 <= i < len(self.login):
            raise IndexError(f"{day} outside the labelled range of player {self.player_id}")
        return i

    def states_on(self, day: date) -> tuple[str, str, str]:
        i = self.offset(day)
        return LOGIN_STATES[self.login[i]], ENGAGEMENT_STATES[self.engagement[i]], PURCHASE_STATES[self.purchase[i]]

    def __eq__(self, other):
        if not isinstance(other, StateTimeline):
            return NotImplemented
        return (
            self.player_id == other.player_id
            and self.first_login == other.first_login
            and np.array_equal(self.login, other.login)
            and np.array_equal(self.engagement, other.engagement)
            and np.array_equal(self.purchase, other.purchase)
            and self.ever_label_dates == other.ever_label_dates
            and self.episodes == other.episodes
        )


def _rolling_sum(values: np.ndarray, width: int) -> np.ndarray:
    """Sum over the trailing ``width`` days including the current one."""
    c = np.concatenate([[0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    return c[idx] - c[np.maximum(idx - width, 0)]


def _churn_states(bitmap: np.ndarray, window: int, first: int) -> np.ndarray:
    n = len(bitmap)
    last = np.maximum.accumulate(np.where(bitmap, np.arange(n), -1))
    since = np.arange(n) - last
    churned = (since > window) & (last >= 0)
    churned[:first] = False
    return churned


def label_states(timeline: PlayerTimeline, rules: ProfilingRules) -> StateTimeline:
    daily = timeline.daily
    n = len(daily)
    base = timeline.start
    day = lambda off: date.fromordinal(base + int(off))
    episodes: list[Episode] = []
    ever: dict[str, date] = {}

    # login churn
    w = rules.login_window
    churned = _churn_states(daily.active, w, 0)
    for s, g, res in zip(*gaps_from_bitmap(daily.active)):
        if g <= w:
            continue
        if not res:
            episodes.append(Episode("churn", day(s - 1), None, int(g), day(s + w)))
        elif g < rules.resurrect_min_gap:
            churned[s + w : s + g] = False
            episodes.append(Episode("genuine_false_churn", day(s - 1), day(s + g), int(g), day(s + w)))
        else:
            episodes.append(Episode("resurrection", day(s - 1), day(s + g), int(g), day(s + w)))
            ever.setdefault("resurrected", day(s + g))

    # purchase churn
    pw = rules.purchase_window
    paid_days = np.flatnonzero(daily.paid)
    purchase = np.full(n, NEVER_PAID, dtype=np.int8)
    if len(paid_days):
        first = int(paid_days[0])
        p_churned = _churn_states(daily.paid, pw, first)
        min_gap = rules.purchase_resurrect_min_gap
        for s, g, res in zip(*gaps_from_bitmap(daily.paid)):
            if g <= pw:
                continue
            if not res:
                episodes.append(Episode("purchase_churn", day(s - 1), None, int(g), day(s + pw)))
            elif min_gap is not None and g < min_gap:
                p_churned[s + pw : s + g] = False
                episodes.append(Episode("genuine_false_purchase_churn", day(s - 1), day(s + g), int(g), day(s + pw)))
            else:
                episodes.append(Episode("purchase_resurrection", day(s - 1), day(s + g), int(g), day(s + pw)))
                ever.setdefault("p_resurrected", day(s + g))
        purchase[first:] = np.where(p_churned[first:], PURCHASE_CHURNED, PAYING)

    # engagement
    lb = rules.zombie_lookback
    active_state = ~churned
    zombie = (
        active_state
        & (np.arange(n) >= lb - 1)
        & (_rolling_sum(daily.playtime, lb) < rules.zombie_max_playtime)
        & (_rolling_sum(daily.levelups, lb) <= rules.zombie_max_levelups)
        & (_rolling_sum(daily.purchases, lb) <= rules.zombie_max_purchases)
    )
    if rules.zombie_requires_active_lookback:
        zombie &= _rolling_sum(churned.astype(np.int64), lb) == 0
    z_days = np.flatnonzero(zombie)
    if len(z_days):
        ever["zombie"] = day(z_days[0])

    episodes.sort(key=lambda e: (e.start, EPISODE_KINDS.index(e.kind)))
    return StateTimeline(
        player_id=timeline.player_id,
        first_login=timeline.first_login,
        login=churned.astype(np.int8),
        engagement=zombie.astype(np.int8),
        purchase=purchase,
        ever_label_dates=dict(sorted(ever.items())),
        episodes=tuple(episodes),
    )


def label_cohort(cohort: Cohort, rules: ProfilingRules) -> dict[str, StateTimeline]:
    return {tl.player_id: label_states(tl, rules) for tl in cohort}


def stratum_of(labels: Iterable[str]) -> str:
    """Single churner type by priority: p_resurrected > resurrected > zombie > normal."""
    labels = set(labels)
    for name in ("p_resurrected", "resurrected", "zombie"):
        if name in labels:
            return name
    return "normal"


STRATUM_PRIORITY = ("p_resurrected", "resurrected", "zombie", "normal")


@dataclass(frozen=True)
class SegmentReport:
    as_of: date
    n_players: int
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def fractions(self) -> dict[str, float]:
        return {k: (v / self.n_players if self.n_players else 0.0) for k, v in self.counts.items()}

    def to_dict(self) -> dict:
        return {"as_of": self.as_of.isoformat(), "n_players": self.n_players,
                "counts": self.counts, "fractions": self.fractions}


def segment_cohort(cohort: Cohort, rules: ProfilingRules, as_of: date) -> SegmentReport:
    """Segment prevalence using only data up to ``as_of``."""
    if not cohort.period[0] <= as_of <= cohort.period[1]:
        raise ValueError("as_of must fall within the cohort period")
    known = cohort.truncate(as_of)
    counts = dict.fromkeys(
        ["churned", "purchase_churned", "ever_zombie", "ever_resurrected", "ever_p_resurrected", "normal",
         "zombie_now"], 0)
    for pid, st in label_cohort(known, rules).items():
        labels = st.ever_labels
        churned_now = bool(st.login[-1] == CHURNED)
        counts["churned"] += churned_now
        counts["purchase_churned"] += bool(st.purchase[-1] == PURCHASE_CHURNED)
        counts["ever_zombie"] += "zombie" in labels
        counts["ever_resurrected"] += "resurrected" in labels
        counts["ever_p_resurrected"] += "p_resurrected" in labels
        counts["normal"] += not labels and not churned_now
        counts["zombie_now"] += bool(st.engagement[-1] == ZOMBIE)
    return SegmentReport(as_of, len(known), counts)


def write_states(states: dict[str, StateTimeline], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["player_id", "date", "login_state", "engagement_state", "purchase_state"])
    for pid in sorted(states):
        st = states[pid]
        base = st.first_login.toordinal()
        for i in range(len(st.login)):
            writer.writerow([
                pid,
                date.fromordinal(base + i).isoformat(),
                LOGIN_STATES[st.login[i]],
                ENGAGEMENT_STATES[st.engagement[i]],
                PURCHASE_STATES[st.purchase[i]],
            ])


def write_episodes(states: dict[str, StateTimeline], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["player_id", "kind", "start", "end", "gap_length"])
    for pid in sorted(states):
        for ep in states[pid].episodes:
            writer.writerow([pid, ep.kind, ep.start.isoformat(), ep.end.isoformat() if ep.end else "", ep.gap_length])
