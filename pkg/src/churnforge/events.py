"""Daily player event logs: ingestion, validation, cohort storage, gaps and VIPs."""

from __future__ import annotations

import calendar
import csv
import gzip
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, timedelta
from decimal import Decimal, InvalidOperation
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

SCHEMA_VERSION = 1

EVENT_COLUMNS = ["player_id", "date", "playtime_s", "sessions", "level", "levelups", "purchases", "spend"]
ACTIVITY_COLUMNS = ["playtime_s", "sessions", "level", "levelups", "purchases", "spend"]
MAX_PLAYTIME_S = 86400


class IngestError(ValueError):
    """Raised when an event stream cannot be turned into a valid cohort.

    ``diagnostics`` holds one human-readable line per rejected row or player.
    """

    def __init__(self, message: str, diagnostics: Iterable[str] = ()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


def parse_date(value) -> date:
    if isinstance(value, date):
        return value
    return date.fromisoformat(str(value).strip()[:10])


def format_cents(cents: int) -> str:
    sign = "-" if cents < 0 else ""
    cents = abs(int(cents))
    return f"{sign}{cents // 100}.{cents % 100:02d}"


def add_months(day: date, months: int) -> date:
    month_index = day.month - 1 + months
    year = day.year + month_index // 12
    month = month_index % 12 + 1
    return date(year, month, min(day.day, calendar.monthrange(year, month)[1]))


@dataclass(frozen=True)
class PlayerDayRecord:
    player_id: str
    date: date
    playtime: int = 0
    sessions: int = 0
    level: int = 0
    levelups: int = 0
    purchases: int = 0
    spend_cents: int = 0

    @property
    def spend(self) -> float:
        return self.spend_cents / 100

    @property
    def is_active(self) -> bool:
        return self.playtime > 0 or self.sessions > 0 or self.purchases > 0


@dataclass(frozen=True)
class DailyView:
    """Dense per-day arrays covering ``[first_login, last_observed]``."""

    playtime: np.ndarray
    sessions: np.ndarray
    level: np.ndarray
    levelups: np.ndarray
    purchases: np.ndarray
    spend_cents: np.ndarray
    active: np.ndarray
    paid: np.ndarray

    def __len__(self) -> int:
        return len(self.active)


@dataclass(frozen=True, eq=False)
class PlayerTimeline:
    """One player's dated daily records.

    Dates are stored as proleptic ordinals (``date.toordinal``). Days without a
    record carry no activity. The first-login day always counts as a login.
    """

    player_id: str
    first_login: date
    last_observed: date
    days: np.ndarray
    playtime: np.ndarray
    sessions: np.ndarray
    level: np.ndarray
    levelups: np.ndarray
    purchases: np.ndarray
    spend_cents: np.ndarray

    def __post_init__(self):
        if len(self.days) == 0:
            raise ValueError(f"player {self.player_id}: timeline has no records")
        if np.any(np.diff(self.days) <= 0):
            raise ValueError(f"player {self.player_id}: record dates must be strictly increasing")
        if int(self.days[0]) != self.first_login.toordinal():
            raise ValueError(f"player {self.player_id}: first record must fall on first_login")
        if int(self.days[-1]) > self.last_observed.toordinal():
            raise ValueError(f"player {self.player_id}: record after last_observed")

    @classmethod
    def from_records(cls, records: list[PlayerDayRecord], last_observed: date) -> "PlayerTimeline":
        records = sorted(records, key=lambda r: r.date)
        return cls(
            player_id=records[0].player_id,
            first_login=records[0].date,
            last_observed=last_observed,
            days=np.array([r.date.toordinal() for r in records], dtype=np.int64),
            playtime=np.array([r.playtime for r in records], dtype=np.int64),
            sessions=np.array([r.sessions for r in records], dtype=np.int64),
            level=np.array([r.level for r in records], dtype=np.int64),
            levelups=np.array([r.levelups for r in records], dtype=np.int64),
            purchases=np.array([r.purchases for r in records], dtype=np.int64),
            spend_cents=np.array([r.spend_cents for r in records], dtype=np.int64),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, PlayerTimeline):
            return NotImplemented
        return (
            self.player_id == other.player_id
            and self.first_login == other.first_login
            and self.last_observed == other.last_observed
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in ("days", "playtime", "sessions", "level", "levelups", "purchases", "spend_cents")
            )
        )

    @property
    def start(self) -> int:
        return self.first_login.toordinal()

    @property
    def end(self) -> int:
        return self.last_observed.toordinal()

    @property
    def n_days(self) -> int:
        return self.end - self.start + 1

    @property
    def records(self) -> list[PlayerDayRecord]:
        return [
            PlayerDayRecord(
                self.player_id,
                date.fromordinal(int(d)),
                int(p),
                int(s),
                int(lv),
                int(lu),
                int(pu),
                int(sp),
            )
            for d, p, s, lv, lu, pu, sp in zip(
                self.days, self.playtime, self.sessions, self.level, self.levelups, self.purchases, self.spend_cents
            )
        ]

    @cached_property
    def daily(self) -> DailyView:
        n = self.n_days
        idx = self.days - self.start

        def spread(values):
            out = np.zeros(n, dtype=np.int64)
            out[idx] = values
            return out

        level = np.zeros(n, dtype=np.int64)
        level[idx] = self.level
        # forward-fill level across days without records
        has = np.zeros(n, dtype=bool)
        has[idx] = True
        last = np.maximum.accumulate(np.where(has, np.arange(n), 0))
        level = level[last]

        playtime = spread(self.playtime)
        sessions = spread(self.sessions)
        purchases = spread(self.purchases)
        active = (playtime > 0) | (sessions > 0) | (purchases > 0)
        active[0] = True
        return DailyView(
            playtime=playtime,
            sessions=sessions,
            level=level,
            levelups=spread(self.levelups),
            purchases=purchases,
            spend_cents=spread(self.spend_cents),
            active=active,
            paid=purchases > 0,
        )

    def truncate(self, as_of: date) -> "PlayerTimeline | None":
        """Timeline as it was known at the end of ``as_of``; ``None`` if not yet born."""
        cut = as_of.toordinal()
        if cut < self.start:
            return None
        keep = self.days <= cut
        return PlayerTimeline(
            player_id=self.player_id,
            first_login=self.first_login,
            last_observed=min(as_of, self.last_observed),
            days=self.days[keep],
            playtime=self.playtime[keep],
            sessions=self.sessions[keep],
            level=self.level[keep],
            levelups=self.levelups[keep],
            purchases=self.purchases[keep],
            spend_cents=self.spend_cents[keep],
        )


@dataclass(frozen=True)
class Cohort:
    timelines: dict[str, PlayerTimeline]
    period: tuple[date, date]
    diagnostics: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        for pid, tl in self.timelines.items():
            if pid != tl.player_id:
                raise ValueError(f"timeline key {pid!r} does not match player_id {tl.player_id!r}")
            if tl.last_observed != self.period[1]:
                raise ValueError(f"player {pid}: last_observed differs from cohort period end")

    def __len__(self) -> int:
        return len(self.timelines)

    def __iter__(self) -> Iterator[PlayerTimeline]:
        for pid in sorted(self.timelines):
            yield self.timelines[pid]

    def __getitem__(self, player_id: str) -> PlayerTimeline:
        return self.timelines[player_id]

    @property
    def player_ids(self) -> list[str]:
        return sorted(self.timelines)

    def truncate(self, as_of: date) -> "Cohort":
        """Everything known at the end of ``as_of`` (no records after it)."""
        as_of = min(as_of, self.period[1])
        out = {}
        for pid, tl in self.timelines.items():
            cut = tl.truncate(as_of)
            if cut is not None:
                out[pid] = cut
        return Cohort(out, (self.period[0], as_of))

    def restrict(self, start: date, end: date) -> "Cohort":
        """Keep records dated within ``[start, end]``.

        A player's first record inside the range becomes their first login.
        """
        lo, hi = start.toordinal(), end.toordinal()
        out = {}
        for pid, tl in self.timelines.items():
            keep = (tl.days >= lo) & (tl.days <= hi)
            if not keep.any():
                continue
            out[pid] = PlayerTimeline(
                player_id=pid,
                first_login=date.fromordinal(int(tl.days[keep][0])),
                last_observed=end,
                days=tl.days[keep],
                playtime=tl.playtime[keep],
                sessions=tl.sessions[keep],
                level=tl.level[keep],
                levelups=tl.levelups[keep],
                purchases=tl.purchases[keep],
                spend_cents=tl.spend_cents[keep],
            )
        return Cohort(out, (start, end))

    def subset(self, player_ids: Iterable[str]) -> "Cohort":
        ids = set(player_ids)
        return Cohort({pid: tl for pid, tl in self.timelines.items() if pid in ids}, self.period)

    def total_spend_cents(self) -> int:
        return int(sum(int(tl.spend_cents.sum()) for tl in self.timelines.values()))


# ---------------------------------------------------------------------------
# ingestion


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def read_event_rows(path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, row)`` from a CSV or JSON-lines file (optionally gzipped)."""
    path = Path(path)
    stem = path.name[:-3] if path.name.endswith(".gz") else path.name
    with _open_text(path) as fh:
        if stem.endswith((".jsonl", ".ndjson", ".json")):
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    row = {"__error__": f"invalid JSON: {exc.msg}"}
                yield lineno, row
        else:
            reader = csv.DictReader(fh)
            for row in reader:
                yield reader.line_num, row


def _as_count(value, name: str) -> int:
    if value is None or value == "":
        return 0
    number = float(value)
    if number != int(number):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if number < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return int(number)


def _as_cents(value) -> int:
    if value is None or value == "":
        return 0
    try:
        amount = Decimal(str(value))
    except InvalidOperation:
        raise ValueError(f"spend is not a number: {value!r}") from None
    if amount < 0:
        raise ValueError(f"spend must be >= 0, got {value!r}")
    cents = amount * 100
    if cents != cents.to_integral_value():
        raise ValueError(f"spend has more than 2 decimals: {value!r}")
    return int(cents)


def _parse_row(row: Mapping, schema: Mapping[str, str]) -> PlayerDayRecord:
    if "__error__" in row:
        raise ValueError(row["__error__"])

    def get(name):
        return row.get(schema.get(name, name))

    pid = get("player_id")
    if pid is None or str(pid).strip() == "":
        raise ValueError("missing player_id")
    raw_date = get("date")
    if raw_date is None or str(raw_date).strip() == "":
        raise ValueError("missing date")
    try:
        day = parse_date(raw_date)
    except ValueError:
        raise ValueError(f"unparseable date {raw_date!r}") from None
    if not any(get(c) not in (None, "") for c in ACTIVITY_COLUMNS):
        raise ValueError("row carries no activity column")

    rec = PlayerDayRecord(
        player_id=str(pid).strip(),
        date=day,
        playtime=_as_count(get("playtime_s"), "playtime_s"),
        sessions=_as_count(get("sessions"), "sessions"),
        level=_as_count(get("level"), "level"),
        levelups=_as_count(get("levelups"), "levelups"),
        purchases=_as_count(get("purchases"), "purchases"),
        spend_cents=_as_cents(get("spend")),
    )
    _check_record(rec)
    return rec


def _check_record(rec: PlayerDayRecord) -> None:
    if rec.playtime > MAX_PLAYTIME_S:
        raise ValueError(f"playtime {rec.playtime}s exceeds one day")
    if rec.spend_cents > 0 and rec.purchases == 0:
        raise ValueError("spend without purchases")


def _merge(a: PlayerDayRecord, b: PlayerDayRecord) -> PlayerDayRecord:
    return PlayerDayRecord(
        a.player_id,
        a.date,
        a.playtime + b.playtime,
        a.sessions + b.sessions,
        max(a.level, b.level),
        a.levelups + b.levelups,
        a.purchases + b.purchases,
        a.spend_cents + b.spend_cents,
    )


def _check_levels(records: list[PlayerDayRecord]) -> list[str]:
    problems = []
    for prev, cur in zip(records, records[1:]):
        if cur.level < prev.level:
            problems.append(f"{cur.date.isoformat()}: level drops {prev.level}->{cur.level}")
        elif cur.levelups != cur.level - prev.level:
            problems.append(
                f"{cur.date.isoformat()}: levelups {cur.levelups} != level increase {cur.level - prev.level}"
            )
    return problems


def ingest_events(
    stream: Iterable,
    schema: Mapping[str, str] | None = None,
    *,
    period: tuple[date, date] | None = None,
    error_budget: int = 0,
) -> Cohort:
    """Build a :class:`Cohort` from row-oriented event data.

    ``stream`` yields mappings, or ``(line_number, mapping)`` pairs as produced by
    :func:`read_event_rows`. ``schema`` maps canonical column names to source
    column names. Rows violating record invariants are rejected; once more than
    ``error_budget`` rows or players are rejected an :class:`IngestError` is raised.
    Duplicate ``(player, date)`` rows are merged: additive fields summed, level max-ed.
    """
    schema = dict(schema or {})
    diagnostics: list[str] = []
    merged: dict[tuple[str, int], PlayerDayRecord] = {}
    n_rows = 0

    def reject(msg):
        diagnostics.append(msg)
        if len(diagnostics) > error_budget:
            raise IngestError(f"{len(diagnostics)} invalid rows exceed error budget {error_budget}", diagnostics)

    for i, item in enumerate(stream, start=1):
        if isinstance(item, tuple):
            lineno, row = item
        else:
            lineno, row = i, item
        n_rows += 1
        try:
            rec = _parse_row(row, schema)
        except (ValueError, TypeError) as exc:
            reject(f"line {lineno}: {exc}")
            continue
        key = (rec.player_id, rec.date.toordinal())
        if key in merged:
            rec = _merge(merged[key], rec)
        merged[key] = rec

    if n_rows == 0:
        raise IngestError("empty input")
    if not merged:
        raise IngestError("no valid rows", diagnostics)

    by_player: dict[str, list[PlayerDayRecord]] = defaultdict(list)
    for (pid, _), rec in sorted(merged.items()):
        by_player[pid].append(rec)

    if period is None:
        days = [k[1] for k in merged]
        period = (date.fromordinal(min(days)), date.fromordinal(max(days)))
    lo, hi = period[0].toordinal(), period[1].toordinal()

    timelines = {}
    for pid, records in sorted(by_player.items()):
        outside = [r.date for r in records if not lo <= r.date.toordinal() <= hi]
        if outside:
            reject(f"player {pid}: {len(outside)} records outside cohort period")
            continue
        problems = _check_levels(records)
        if problems:
            reject(f"player {pid}: invalid level sequence on " + "; ".join(problems))
            continue
        timelines[pid] = PlayerTimeline.from_records(records, period[1])

    return Cohort(timelines, period, tuple(diagnostics))


def load_events(path, schema=None, *, period=None, error_budget: int = 0) -> Cohort:
    return ingest_events(read_event_rows(path), schema, period=period, error_budget=error_budget)


def record_row(rec: PlayerDayRecord) -> list[str]:
    return [
        rec.player_id,
        rec.date.isoformat(),
        str(rec.playtime),
        str(rec.sessions),
        str(rec.level),
        str(rec.levelups),
        str(rec.purchases),
        format_cents(rec.spend_cents),
    ]


def write_events_csv(records: Iterable[PlayerDayRecord], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(EVENT_COLUMNS)
    for rec in records:
        writer.writerow(record_row(rec))


def save_cohort(cohort: Cohort, directory) -> Path:
    """Write ``manifest.json`` + ``players.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_records = 0
    with open(directory / "players.csv", "w", encoding="utf-8", newline="") as fh:
        records = [r for tl in cohort for r in tl.records]
        n_records = len(records)
        write_events_csv(records, fh)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "period": [cohort.period[0].isoformat(), cohort.period[1].isoformat()],
        "n_players": len(cohort),
        "n_records": n_records,
        "columns": EVENT_COLUMNS,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_cohort(directory) -> Cohort:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise IngestError(f"unsupported cohort schema version {manifest.get('schema_version')!r}")
    period = (parse_date(manifest["period"][0]), parse_date(manifest["period"][1]))
    if manifest.get("n_players", 0) == 0:
        return Cohort({}, period)
    return load_events(directory / "players.csv", period=period)


def load_any(path, **kwargs) -> Cohort:
    """Load a saved cohort directory or an event file."""
    path = Path(path)
    if path.is_dir():
        return load_cohort(path)
    return load_events(path, **kwargs)


# ---------------------------------------------------------------------------
# gaps and VIPs


@dataclass(frozen=True)
class Gap:
    """A run of consecutive days without qualifying activity.

    ``start`` is the first inactive day; ``resolved`` is False for the trailing
    gap that is still open at ``last_observed``.
    """

    start: date
    length: int
    resolved: bool

    @property
    def last_active(self) -> date:
        return self.start - timedelta(days=1)

    @property
    def end(self) -> date | None:
        """Return day for resolved gaps."""
        return self.start + timedelta(days=self.length) if self.resolved else None


def gaps_from_bitmap(active: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaps of a daily activity bitmap as ``(start_offset, length, resolved)`` arrays.

    Days before the first active day are ignored.
    """
    on = np.flatnonzero(active)
    if len(on) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0, dtype=bool)
    lengths = np.diff(on) - 1
    inner = lengths > 0
    starts = on[:-1][inner] + 1
    lengths = lengths[inner]
    resolved = np.ones(len(starts), dtype=bool)
    tail = len(active) - 1 - on[-1]
    if tail > 0:
        starts = np.append(starts, on[-1] + 1)
        lengths = np.append(lengths, tail)
        resolved = np.append(resolved, False)
    return starts.astype(np.int64), lengths.astype(np.int64), resolved


def activity_bitmap(timeline: PlayerTimeline, kind: str) -> np.ndarray:
    if kind == "login":
        return timeline.daily.active
    if kind == "purchase":
        return timeline.daily.paid
    raise ValueError(f"kind must be 'login' or 'purchase', got {kind!r}")


def activity_gaps(timeline: PlayerTimeline, kind: str = "login") -> list[Gap]:
    """Inactivity gaps of ``timeline`` for login or purchase activity."""
    starts, lengths, resolved = gaps_from_bitmap(activity_bitmap(timeline, kind))
    base = timeline.start
    return [
        Gap(date.fromordinal(base + int(s)), int(n), bool(r)) for s, n, r in zip(starts, lengths, resolved)
    ]


def leading_months(cohort: Cohort, months: int) -> tuple[date, date]:
    """The first ``months`` calendar months of the cohort period (clipped to its end)."""
    start = cohort.period[0]
    end = min(add_months(start, months) - timedelta(days=1), cohort.period[1])
    return start, end


def default_vip_window(cohort: Cohort) -> tuple[date, date]:
    return leading_months(cohort, 2)


def select_vip(
    cohort: Cohort,
    revenue_share_target: float = 0.5,
    observation_window: tuple[date, date] | None = None,
) -> tuple[float, set[str]]:
    """Spend threshold and ids of the top spenders providing ``revenue_share_target`` of revenue.

    Players tied at the threshold are all included, so the realised share can
    exceed the target.
    """
    if not 0 < revenue_share_target < 1:
        raise ValueError("revenue_share_target must lie in (0, 1)")
    lo, hi = observation_window or default_vip_window(cohort)
    if lo < cohort.period[0] or hi > cohort.period[1] or lo > hi:
        raise ValueError("observation window must lie within the cohort period")
    a, b = lo.toordinal(), hi.toordinal()
    spend = {}
    for tl in cohort:
        inside = (tl.days >= a) & (tl.days <= b)
        spend[tl.player_id] = int(tl.spend_cents[inside].sum())
    total = sum(spend.values())
    if total == 0:
        raise ValueError("no revenue in window")
    ranked = sorted(spend.items(), key=lambda kv: (-kv[1], kv[0]))
    running = 0
    threshold = ranked[0][1]
    for _, cents in ranked:
        running += cents
        threshold = cents
        if running >= revenue_share_target * total:
            break
    vips = {pid for pid, cents in spend.items() if cents >= threshold and cents > 0}
    return threshold / 100, vips
