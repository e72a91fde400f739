"""Seeded synthetic player behaviour with planted churn, zombie and resurrection truth.

Each player draws an archetype, an arrival day and then alternates between
phases: active play, zombie phases (sporadic short logins with no progress or
spending), churn gaps that either end in a return or never end, and purchase
pauses that stop spending while play continues. Every player has an
independent RNG stream ``(seed, player_index)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .config import ConfigError, check_keys, read_json_object
from .events import EVENT_COLUMNS, format_cents


@dataclass(frozen=True)
class Archetype:
    weight: float
    login_prob: float = 0.8
    sessions_mean: float = 2.0
    playtime_mu: float = math.log(2400)  # log-seconds per login day
    playtime_sigma: float = 0.6
    levelup_prob: float = 0.25
    level_scale: float = 60.0  # level-up odds halve every level_scale levels
    purchase_prob: float = 0.2
    spend_scale: float = 1.99
    spend_tail: float = 2.5  # Pareto tail index
    # [[tenure_day, daily_hazard], ...] piecewise constant from each tenure day on
    churn_hazard: tuple[tuple[int, float], ...] = ((0, 0.004),)
    resurrect_prob: float = 0.0
    return_gap: tuple[int, int] = (30, 90)
    # explicit [[gap_days, weight], ...]; overrides return_gap when set
    return_gap_pmf: tuple[tuple[int, float], ...] | None = None
    post_return_hazard_mult: float = 1.0
    post_return_purchase_mult: float = 1.0
    zombie_prob: float = 0.0
    zombie_duration: tuple[int, int] = (45, 120)
    zombie_login_prob: float = 0.4
    zombie_playtime_s: float = 300.0
    zombie_hazard_mult: float = 1.0
    post_zombie_hazard_mult: float = 1.0
    max_zombie_phases: int = 1
    pause_prob: float = 0.0
    pause_length: tuple[int, int] = (55, 120)
    pause_length_pmf: tuple[tuple[int, float], ...] | None = None
    max_pauses: int = 1
    post_pause_hazard_mult: float = 1.0
    # disengagement before a churn: the last decline_days of play scale the login odds
    decline_days: int = 0
    decline_factor: float = 1.0

    def validate(self, key: str) -> None:
        probs = ("login_prob", "purchase_prob", "levelup_prob", "resurrect_prob", "zombie_prob",
                 "zombie_login_prob", "pause_prob", "decline_factor")
        for name in probs:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{key}.{name}", f"probability must be in [0, 1], got {v}")
        if self.weight < 0:
            raise ConfigError(f"{key}.weight", "must be >= 0")
        if self.decline_days < 0:
            raise ConfigError(f"{key}.decline_days", "must be >= 0")
        if self.sessions_mean < 1:
            raise ConfigError(f"{key}.sessions_mean", "must be >= 1")
        if self.playtime_sigma < 0:
            raise ConfigError(f"{key}.playtime_sigma", "must be >= 0")
        if self.spend_tail <= 0 or self.spend_scale <= 0:
            raise ConfigError(f"{key}.spend_tail", "spend distribution parameters must be > 0")
        if not self.churn_hazard or self.churn_hazard[0][0] != 0:
            raise ConfigError(f"{key}.churn_hazard", "must start at tenure day 0")
        for day, h in self.churn_hazard:
            if not 0.0 <= h <= 1.0:
                raise ConfigError(f"{key}.churn_hazard", f"hazard must be in [0, 1], got {h}")
        for name in ("return_gap", "zombie_duration", "pause_length"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{key}.{name}", "needs 1 <= low <= high")
        for name in ("return_gap_pmf", "pause_length_pmf"):
            pmf = getattr(self, name)
            if pmf is not None and (not pmf or any(v < 1 or w < 0 for v, w in pmf) or sum(w for _, w in pmf) <= 0):
                raise ConfigError(f"{key}.{name}", "needs positive values and non-negative weights")


DEFAULT_ARCHETYPES: dict[str, Archetype] = {
    "engaged": Archetype(
        weight=0.32, login_prob=0.85, sessions_mean=3.0, playtime_mu=math.log(3000), levelup_prob=0.3,
        purchase_prob=0.25, churn_hazard=((0, 0.004), (90, 0.001)), resurrect_prob=0.05, pause_prob=0.0005,
        decline_days=21, decline_factor=0.35,
    ),
    "casual": Archetype(
        weight=0.18, login_prob=0.7, sessions_mean=1.5, playtime_mu=math.log(1500), levelup_prob=0.15,
        purchase_prob=0.2, churn_hazard=((0, 0.005), (90, 0.002)), resurrect_prob=0.1, pause_prob=0.0005,
        decline_days=21, decline_factor=0.35,
    ),
    # zombie phases followed by normal-looking play at raised hazard
    "zombie_prone": Archetype(
        weight=0.14, login_prob=0.7, sessions_mean=1.5, playtime_mu=math.log(1800), levelup_prob=0.15,
        purchase_prob=0.2, churn_hazard=((0, 0.006),), zombie_prob=0.05, zombie_duration=(45, 120),
        zombie_hazard_mult=3.0, post_zombie_hazard_mult=3.0,
        decline_days=21, decline_factor=0.35,
    ),
    # early churn and a return, after which play is indistinguishable from engaged players
    "resurrect_prone": Archetype(
        weight=0.31, login_prob=0.85, sessions_mean=3.0, playtime_mu=math.log(3000), levelup_prob=0.3,
        purchase_prob=0.25, churn_hazard=((0, 0.02), (120, 0.008)), resurrect_prob=0.9, return_gap=(30, 42),
        post_return_hazard_mult=1.5,
        decline_days=21, decline_factor=0.35,
    ),
    "whale": Archetype(
        weight=0.05, login_prob=0.9, sessions_mean=4.0, playtime_mu=math.log(4500), levelup_prob=0.35,
        purchase_prob=0.6, spend_scale=9.99, spend_tail=1.3, churn_hazard=((0, 0.002),),
        decline_days=21, decline_factor=0.35,
    ),
}


@dataclass(frozen=True)
class SimConfig:
    n_players: int = 2000
    start: date = date(2016, 1, 1)
    end: date = date(2017, 6, 30)
    arrival: str = "uniform"  # uniform | front_loaded | fixed
    arrival_days: int = 365
    archetypes: dict[str, Archetype] = field(default_factory=lambda: dict(DEFAULT_ARCHETYPES))
    seed: int = 0

    def validate(self) -> "SimConfig":
        if self.n_players < 0:
            raise ConfigError("n_players", "must be >= 0")
        if self.end < self.start:
            raise ConfigError("end", "must not precede start")
        if self.arrival not in ("uniform", "front_loaded", "fixed"):
            raise ConfigError("arrival", f"unknown arrival model {self.arrival!r}")
        if self.arrival_days < 1:
            raise ConfigError("arrival_days", "must be >= 1")
        if not self.archetypes:
            raise ConfigError("archetypes", "at least one archetype required")
        for name, arch in self.archetypes.items():
            arch.validate(f"archetypes.{name}")
        total = sum(a.weight for a in self.archetypes.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError("archetypes", f"mixture weights must sum to 1, got {total:g}")
        return self

    @property
    def n_days(self) -> int:
        return (self.end - self.start).days + 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["start"] = self.start.isoformat()
        out["end"] = self.end.isoformat()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        check_keys(data, {f.name for f in fields(cls)})
        kw = dict(data)
        for key in ("start", "end"):
            if key in kw:
                try:
                    kw[key] = date.fromisoformat(kw[key])
                except (TypeError, ValueError):
                    raise ConfigError(key, f"not an ISO date: {kw[key]!r}") from None
        if "archetypes" in kw:
            arch_fields = {f.name for f in fields(Archetype)}
            archetypes = {}
            for name, spec in kw["archetypes"].items():
                if not isinstance(spec, dict):
                    raise ConfigError(f"archetypes.{name}", "must be an object")
                check_keys(spec, arch_fields, f"archetypes.{name}.")
                spec = {k: _tupleize(v) for k, v in spec.items()}
                for k, v in spec.items():
                    _check_type(f"archetypes.{name}.{k}", v, Archetype.__dataclass_fields__[k].default)
                try:
                    archetypes[name] = Archetype(**spec)
                except TypeError as exc:
                    raise ConfigError(f"archetypes.{name}", str(exc)) from None
            kw["archetypes"] = archetypes
        for key in ("n_players", "arrival_days", "seed"):
            if key in kw and (not isinstance(kw[key], int) or isinstance(kw[key], bool)):
                raise ConfigError(key, "must be an integer")
        return cls(**kw).validate()

    @classmethod
    def load(cls, path) -> "SimConfig":
        return cls.from_dict(read_json_object(path))


def _check_type(key: str, value, default) -> None:
    number = lambda v: isinstance(v, (int, float)) and not isinstance(v, bool)
    if isinstance(default, (int, float)) and not number(value):
        raise ConfigError(key, "must be a number")
    if isinstance(default, tuple) or default is None:
        if value is not None and not isinstance(value, tuple):
            raise ConfigError(key, "must be a list")
        flat = [x for item in (value or ()) for x in (item if isinstance(item, tuple) else (item,))]
        if not all(number(x) for x in flat):
            raise ConfigError(key, "must contain only numbers")


def _tupleize(v):
    if isinstance(v, list):
        return tuple(_tupleize(x) for x in v)
    return v


# ---------------------------------------------------------------------------
# ground truth


@dataclass
class PlayerTruth:
    player_id: str
    archetype: str
    arrival: date
    churns: list[dict] = field(default_factory=list)  # {"last_login", "return" | None, "gap"}
    zombie_phases: list[tuple[date, date]] = field(default_factory=list)
    purchase_pauses: list[dict] = field(default_factory=list)  # {"last_purchase", "return", "gap"}

    def to_dict(self) -> dict:
        return {
            "player_id": self.player_id,
            "archetype": self.archetype,
            "arrival": self.arrival.isoformat(),
            "churns": [
                {"last_login": c["last_login"].isoformat(),
                 "return": c["return"].isoformat() if c["return"] else None, "gap": c["gap"]}
                for c in self.churns
            ],
            "zombie_phases": [[a.isoformat(), b.isoformat()] for a, b in self.zombie_phases],
            "purchase_pauses": [
                {"last_purchase": p["last_purchase"].isoformat(), "return": p["return"].isoformat(), "gap": p["gap"]}
                for p in self.purchase_pauses
            ],
        }

    @property
    def resurrections(self) -> list[dict]:
        return [c for c in self.churns if c["return"] is not None]


@dataclass
class GroundTruth:
    players: dict[str, PlayerTruth]
    config: SimConfig
    seed: int

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config.to_dict(),
            "players": [self.players[k].to_dict() for k in sorted(self.players)],
        }

    def archetype_of(self, player_id: str) -> str:
        return self.players[player_id].archetype


@dataclass
class SimulatedLog:
    """Simulated daily records as column arrays in canonical (player, date) order."""

    player_id: list[str]
    day: np.ndarray  # ordinals
    playtime: np.ndarray
    sessions: np.ndarray
    level: np.ndarray
    levelups: np.ndarray
    purchases: np.ndarray
    spend_cents: np.ndarray

    def __len__(self) -> int:
        return len(self.player_id)

    def rows(self):
        for i in range(len(self)):
            yield {
                "player_id": self.player_id[i],
                "date": date.fromordinal(int(self.day[i])).isoformat(),
                "playtime_s": str(int(self.playtime[i])),
                "sessions": str(int(self.sessions[i])),
                "level": str(int(self.level[i])),
                "levelups": str(int(self.levelups[i])),
                "purchases": str(int(self.purchases[i])),
                "spend": format_cents(int(self.spend_cents[i])),
            }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EVENT_COLUMNS)
        for row in self.rows():
            writer.writerow([row[c] for c in EVENT_COLUMNS])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# generation


def _draw_pmf(rng, pmf, lo_hi) -> int:
    if pmf is not None:
        values = np.array([v for v, _ in pmf])
        weights = np.array([w for _, w in pmf], dtype=float)
        return int(values[rng.choice(len(values), p=weights / weights.sum())])
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def _hazard(arch: Archetype, tenure: np.ndarray) -> np.ndarray:
    starts = np.array([d for d, _ in arch.churn_hazard])
    values = np.array([h for _, h in arch.churn_hazard])
    return values[np.searchsorted(starts, tenure, side="right") - 1]


def _first_hit(rng, probs: np.ndarray) -> int:
    """Index of the first success of independent Bernoulli trials (len if none)."""
    hits = np.flatnonzero(rng.random(len(probs)) < probs)
    return int(hits[0]) if len(hits) else len(probs)


_PLAY, _ZOMBIE = 1, 2


class _Player:
    """Mutable per-player day arrays filled phase by phase."""

    def __init__(self, n_days: int):
        self.phase = np.zeros(n_days, dtype=np.int8)
        self.login = np.zeros(n_days, dtype=bool)
        self.playtime = np.zeros(n_days, dtype=np.int64)
        self.sessions = np.zeros(n_days, dtype=np.int64)
        self.levelups = np.zeros(n_days, dtype=np.int64)
        self.purchases = np.zeros(n_days, dtype=np.int64)
        self.spend = np.zeros(n_days, dtype=np.int64)
        self.level = 1


def _play(rng, arch: Archetype, p: _Player, a: int, b: int, no_purchase: np.ndarray, force: tuple[int, ...],
          buy_mult: float = 1.0, decline_from: int | None = None):
    """Normal play on days ``[a, b)``; days in ``force`` always log in.

    From ``decline_from`` on, login odds shrink by ``decline_factor``.
    """
    n = b - a
    if n <= 0:
        return
    scale = np.ones(n)
    if decline_from is not None:
        scale[max(0, decline_from - a):] = arch.decline_factor
    login = rng.random(n) < arch.login_prob * scale
    for f in force:
        if a <= f < b:
            login[f - a] = True
    sessions = 1 + rng.poisson(arch.sessions_mean - 1.0, n)
    playtime = np.clip(np.rint(rng.lognormal(arch.playtime_mu, arch.playtime_sigma, n)), 60, 20 * 3600)
    level_u = rng.random(n)
    buy_u = rng.random(n)
    n_buy = 1 + rng.poisson(0.3, n)
    price = arch.spend_scale * (1.0 + rng.pareto(arch.spend_tail, n))
    levelups = np.zeros(n, dtype=np.int64)
    for i in np.flatnonzero(login):
        if level_u[i] < arch.levelup_prob * 0.5 ** (p.level / arch.level_scale):
            levelups[i] = 1
            p.level += 1
    buys = login & (buy_u < arch.purchase_prob * buy_mult) & ~no_purchase[a:b]
    sl = slice(a, b)
    p.phase[sl] = _PLAY
    p.login[sl] |= login
    p.sessions[sl] = np.where(login, sessions, 0)
    p.playtime[sl] = np.where(login, playtime, 0).astype(np.int64)
    p.levelups[sl] = levelups
    p.purchases[sl] = np.where(buys, n_buy, 0)
    p.spend[sl] = np.where(buys, np.rint(price * 100) * n_buy, 0).astype(np.int64)


def _zombie(rng, arch: Archetype, p: _Player, a: int, b: int):
    n = b - a
    if n <= 0:
        return
    login = rng.random(n) < arch.zombie_login_prob
    play = np.clip(np.rint(rng.lognormal(math.log(arch.zombie_playtime_s), 0.5, n)), 30, 1800)
    sl = slice(a, b)
    p.phase[sl] = _ZOMBIE
    p.login[sl] = login
    p.sessions[sl] = login.astype(np.int64)
    p.playtime[sl] = np.where(login, play, 0).astype(np.int64)
    p.levelups[sl] = 0
    p.purchases[sl] = 0
    p.spend[sl] = 0


def _simulate_player(cfg: SimConfig, seed: int, index: int, names: list[str], weights: np.ndarray):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    name = names[int(rng.choice(len(names), p=weights))]
    arch = cfg.archetypes[name]
    n_days = cfg.n_days
    span = min(cfg.arrival_days, n_days)
    if cfg.arrival == "fixed":
        arrival = 0
    elif cfg.arrival == "front_loaded":
        arrival = min(int(rng.exponential(span / 3.0)), span - 1)
    else:
        arrival = int(rng.integers(0, span))
    base = cfg.start.toordinal()
    pid = f"p{index:06d}"
    truth = PlayerTruth(pid, name, date.fromordinal(base + arrival))
    p = _Player(n_days)

    # purchase pauses are drawn up front: they mask spending, not play
    no_purchase = np.zeros(n_days, dtype=bool)
    pauses = []
    if arch.pause_prob > 0:
        d = arrival
        for _ in range(arch.max_pauses):
            d += 1 + int(rng.geometric(arch.pause_prob))
            length = _draw_pmf(rng, arch.pause_length_pmf, arch.pause_length)
            if d + length + 1 >= n_days:
                break
            no_purchase[d + 1 : d + 1 + length] = True
            pauses.append((d, length))
            d += length + 1

    mult = 1.0
    buy_mult = 1.0
    zombies_left = arch.max_zombie_phases
    t = arrival
    force = [arrival]
    while t < n_days:
        remaining = n_days - t
        hz = np.minimum(1.0, _hazard(arch, np.arange(t, n_days) - arrival) * mult)
        churn_at = _first_hit(rng, hz)
        zombie_at = _first_hit(rng, np.full(remaining, arch.zombie_prob)) if zombies_left > 0 else remaining
        if 0 < zombie_at < churn_at:
            _play(rng, arch, p, t, t + zombie_at, no_purchase, tuple(force), buy_mult)
            z0 = t + zombie_at
            z1 = min(n_days, z0 + _draw_pmf(rng, None, arch.zombie_duration))
            # churn may strike during the zombie phase
            zhz = np.minimum(1.0, _hazard(arch, np.arange(z0, z1) - arrival) * mult * arch.zombie_hazard_mult)
            zc = _first_hit(rng, zhz)
            z_end = z0 + min(zc + 1, z1 - z0)
            _zombie(rng, arch, p, z0, z_end)
            truth.zombie_phases.append((date.fromordinal(base + z0), date.fromordinal(base + z_end - 1)))
            zombies_left -= 1
            mult *= arch.post_zombie_hazard_mult
            t = z_end
            if zc < z1 - z0:
                last = int(np.flatnonzero(p.login[:t])[-1])
                t = _after_churn(rng, arch, truth, base, last, n_days)
                if t is None:
                    break
                mult *= arch.post_return_hazard_mult
                buy_mult = arch.post_return_purchase_mult
            force = [t]
            continue
        end = min(n_days, t + churn_at + 1)
        churns = churn_at < remaining
        decline = end - arch.decline_days if churns and arch.decline_days else None
        _play(rng, arch, p, t, end, no_purchase, tuple(force) + ((end - 1,) if churns else ()), buy_mult, decline)
        if not churns:
            break
        t = _after_churn(rng, arch, truth, base, end - 1, n_days)
        if t is None:
            break
        force = [t]
        mult *= arch.post_return_hazard_mult
        buy_mult = arch.post_return_purchase_mult

    # a pause is planted exactly when both boundary days fall in normal play
    for d, length in pauses:
        r = d + length + 1
        if p.phase[d] == _PLAY and p.phase[r] == _PLAY and not p.purchases[d + 1 : r].any():
            _force_purchase(rng, arch, p, d)
            _force_purchase(rng, arch, p, r)
            truth.purchase_pauses.append({"last_purchase": date.fromordinal(base + d),
                                          "return": date.fromordinal(base + r), "gap": length})
    return pid, p, truth


def _force_purchase(rng, arch: Archetype, p: _Player, d: int):
    p.login[d] = True
    if p.purchases[d] == 0:
        p.purchases[d] = 1
        p.spend[d] = int(round(arch.spend_scale * (1.0 + rng.pareto(arch.spend_tail)) * 100))
        p.sessions[d] = max(p.sessions[d], 1)
        p.playtime[d] = max(p.playtime[d], 60)


def _after_churn(rng, arch: Archetype, truth: PlayerTruth, base: int, last: int, n_days: int):
    """Record a churn after login day ``last``; return the comeback day or ``None``."""
    if rng.random() < arch.resurrect_prob:
        gap = _draw_pmf(rng, arch.return_gap_pmf, arch.return_gap)
        back = last + gap + 1
        if back < n_days:
            truth.churns.append({"last_login": date.fromordinal(base + last),
                                 "return": date.fromordinal(base + back), "gap": gap})
            return back
    truth.churns.append({"last_login": date.fromordinal(base + last), "return": None, "gap": None})
    return None


def simulate(config: SimConfig, seed: int | None = None) -> tuple[SimulatedLog, GroundTruth]:
    """Generate an event log and its ground truth; deterministic in ``(config, seed)``."""
    config.validate()
    seed = config.seed if seed is None else seed
    names = sorted(config.archetypes)
    weights = np.array([config.archetypes[n].weight for n in names], dtype=float)
    weights = weights / weights.sum()
    base = config.start.toordinal()
    cols = {k: [] for k in ("pid", "day", "playtime", "sessions", "level", "levelups", "purchases", "spend")}
    players = {}
    for index in range(config.n_players):
        pid, p, truth = _simulate_player(config, seed, index, names, weights)
        players[pid] = truth
        days = np.flatnonzero(p.login)
        level = 1 + np.cumsum(p.levelups)
        cols["pid"].extend([pid] * len(days))
        cols["day"].append(days + base)
        cols["playtime"].append(p.playtime[days])
        cols["sessions"].append(p.sessions[days])
        cols["level"].append(level[days])
        cols["levelups"].append(p.levelups[days])
        cols["purchases"].append(p.purchases[days])
        cols["spend"].append(p.spend[days])
    cat = lambda parts: np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, dtype=np.int64)
    log = SimulatedLog(
        player_id=cols["pid"],
        day=cat(cols["day"]),
        playtime=cat(cols["playtime"]),
        sessions=cat(cols["sessions"]),
        level=cat(cols["level"]),
        levelups=cat(cols["levelups"]),
        purchases=cat(cols["purchases"]),
        spend_cents=cat(cols["spend"]),
    )
    return log, GroundTruth(players, config, seed)


def write_outputs(log: SimulatedLog, truth: GroundTruth, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "events.csv").write_text(log.to_csv(), encoding="utf-8")
    (out / "truth.json").write_text(json.dumps(truth.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


def to_cohort(log: SimulatedLog, config: SimConfig):
    """Build a :class:`~churnforge.events.Cohort` directly from simulated columns.

    Equivalent to writing ``events.csv`` and ingesting it, without the text round trip.
    """
    from .events import Cohort, PlayerTimeline

    ids = np.asarray(log.player_id)
    timelines = {}
    if len(ids):
        starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
        bounds = np.r_[starts, len(ids)]
        for a, b in zip(bounds[:-1], bounds[1:]):
            pid = str(ids[a])
            timelines[pid] = PlayerTimeline(
                player_id=pid,
                first_login=date.fromordinal(int(log.day[a])),
                last_observed=config.end,
                days=log.day[a:b].copy(),
                playtime=log.playtime[a:b].copy(),
                sessions=log.sessions[a:b].copy(),
                level=log.level[a:b].copy(),
                levelups=log.levelups[a:b].copy(),
                purchases=log.purchases[a:b].copy(),
                spend_cents=log.spend_cents[a:b].copy(),
            )
    return Cohort(timelines, (config.start, config.end))


def simulate_cohort(config: SimConfig, seed: int | None = None):
    """Simulate straight into a :class:`~churnforge.events.Cohort` (plus truth)."""
    log, truth = simulate(config, seed)
    if len(log) == 0:
        raise ValueError("simulation produced no players")
    return to_cohort(log, config), truth


# ---------------------------------------------------------------------------
# planted calibration cases


def _planted_gaps(target: int) -> tuple[tuple[int, float], ...]:
    """Half the mass on ``target``, the rest spread over shorter gaps."""
    shorter = list(range(max(1, target // 2), target))
    if not shorter:
        return ((target, 1.0),)
    return ((target, 0.5),) + tuple((g, 0.5 / len(shorter)) for g in shorter)


def _calibration_config(target: int, kind: str, n_players: int, seed: int) -> SimConfig:
    early = ((0, 0.1), (20, 0.0))
    steady = Archetype(weight=0.7, login_prob=0.99, purchase_prob=0.95 if kind == "purchase" else 0.3,
                       churn_hazard=((0, 0.0),))
    quitter = replace(steady, weight=0.15, churn_hazard=early)
    if kind == "login":
        returner = replace(steady, weight=0.15, churn_hazard=early, resurrect_prob=1.0,
                           return_gap_pmf=_planted_gaps(target))
    else:
        returner = replace(steady, weight=0.15, pause_prob=0.1, max_pauses=1,
                           pause_length_pmf=_planted_gaps(target))
    return SimConfig(
        n_players=n_players,
        start=date(2016, 1, 1),
        end=date(2016, 1, 1) + timedelta(days=target + 75),
        arrival="fixed",
        archetypes={"steady": steady, "returner": returner, "quitter": quitter},
        seed=seed,
    ).validate()


def plant_calibration_case(target_window: int, kind: str = "login", *, n_players: int = 2000, seed: int = 0,
                           max_attempts: int = 5) -> SimConfig:
    """A config whose planted gaps make window calibration select exactly ``target_window``.

    Steady players rarely skip a day, quitters churn for good early on and
    returners come back after a planted gap (a purchase pause for
    ``kind="purchase"``) of exactly ``target_window`` days or shorter. Below
    the target the returners are false churners; at the target none are.
    The choice is verified by running the calibration scan on the simulated
    cohort, retrying with successive seeds.
    """
    from .calibration import DEFAULT_GRID, NoFeasibleWindow, calibrate_window

    if kind not in ("login", "purchase"):
        raise ValueError("kind must be 'login' or 'purchase'")
    if not DEFAULT_GRID[0] <= target_window <= DEFAULT_GRID[-1]:
        raise ValueError(f"target window must be in {DEFAULT_GRID[0]}..{DEFAULT_GRID[-1]}")
    if n_players < 100:
        raise ValueError("need at least 100 players to plant a calibration case")
    for attempt in range(max_attempts):
        cfg = _calibration_config(target_window, kind, n_players, seed + attempt)
        cohort, _ = simulate_cohort(cfg)
        try:
            window, _ = calibrate_window(cohort, kind=kind)
        except NoFeasibleWindow:
            continue
        if window == target_window:
            return cfg
    raise ValueError(f"could not plant a {kind} calibration case for window {target_window}")
