from __future__ import annotations

from datetime import date, timedelta

import numpy as np
import pytest

from churnforge.events import Cohort, PlayerDayRecord, PlayerTimeline
from churnforge.simulator import SimConfig, simulate_cohort

DAY0 = date(2020, 1, 1)


def day(offset: int) -> date:
    return DAY0 + timedelta(days=offset)


def make_timeline(pid: str, activity: dict[int, dict] | list[int], n_days: int) -> PlayerTimeline:
    """Timeline from ``{offset: fields}`` (or a list of active offsets) over ``n_days`` days.

    Level is derived from the running sum of level-ups so records stay valid.
    """
    if not isinstance(activity, dict):
        activity = {d: {} for d in activity}
    records = []
    level = 1
    for off in sorted(activity):
        f = {"playtime": 3600, "sessions": 1, **activity[off]}
        level += f.get("levelups", 0)
        records.append(PlayerDayRecord(pid, day(off), f["playtime"], f["sessions"], level,
                                       f.get("levelups", 0), f.get("purchases", 0), f.get("spend_cents", 0)))
    return PlayerTimeline.from_records(records, day(n_days - 1))


def make_cohort(timelines: list[PlayerTimeline], n_days: int) -> Cohort:
    return Cohort({tl.player_id: tl for tl in timelines}, (DAY0, day(n_days - 1)))


def bitmap_of(activity, n_days: int) -> np.ndarray:
    bits = np.zeros(n_days, dtype=bool)
    bits[list(activity)] = True
    return bits


@pytest.fixture(scope="session")
def default_sim():
    """Default 2000-player simulated cohort and its ground truth (seed 0)."""
    return simulate_cohort(SimConfig(), seed=0)


@pytest.fixture(scope="session")
def small_sim():
    return simulate_cohort(SimConfig(n_players=300), seed=3)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
