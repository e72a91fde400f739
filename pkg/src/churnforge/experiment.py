"""Training-exclusion experiment: every exclusion combo, model family, churn kind and axis.

Training rows are players active at a snapshot ``split_date - horizon``,
featurised on that day, with responses observed through ``split_date``.
Validation rows are the players still unlabelled (normal) and active on
``split_date``, featurised on that day, with responses observed through
``validation_end``. Exclusion labels are computed on the cohort truncated at
``split_date`` so nothing dated later can leak into the training set.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, check_keys, read_json_object
from .ctree import BinaryResponse, SurvivalResponse
from .evaluation import auc, cohort_hash, error_curves
from .events import Cohort, add_months, default_vip_window, select_vip
from .features import FEATURE_NAMES, TYPE_FLAG_NAMES, feature_matrix
from .forest import ForestParams, fit_forest, predict_probability
from .profiling import ACTIVE, PAYING, SEGMENTS, ProfilingRules, StateTimeline, label_cohort
from .survival import AXES, KINDS, as_arrays, to_survival_samples

log = logging.getLogger(__name__)

FAMILIES = ("binary", "survival")

# rows of the reference results table, in order
DEFAULT_COMBOS: tuple[tuple[str, ...], ...] = (
    (),
    ("zombie",),
    ("resurrected",),
    ("p_resurrected",),
    ("zombie", "resurrected"),
    ("zombie", "p_resurrected"),
    ("resurrected", "p_resurrected"),
    ("zombie", "resurrected", "p_resurrected"),
)

_LOGIN_CHURN = ("churn", "resurrection")
_PURCHASE_CHURN = ("purchase_churn", "purchase_resurrection")


def combo_tag(combo: Sequence[str]) -> str:
    return "+".join(combo) if combo else "none"


def column_name(family: str, kind: str, axis: str | None = None) -> str:
    return f"auc_{kind}" if family == "binary" else f"ibs_{kind}_{axis}"


@dataclass(frozen=True)
class ExperimentSpec:
    split_date: date | None = None  # None: two months before validation_end
    validation_end: date | None = None  # None: end of the cohort period
    horizon_days: int | None = None  # None: validation span
    exclusion_combos: tuple[tuple[str, ...], ...] = DEFAULT_COMBOS
    families: tuple[str, ...] = FAMILIES
    kinds: tuple[str, ...] = KINDS
    axes: tuple[str, ...] = AXES
    forest: ForestParams = ForestParams()
    rules: ProfilingRules = ProfilingRules()
    seed: int = 0
    vip_only: bool = False
    type_flags: bool = False
    ipcw: bool = True

    def resolve(self, cohort: Cohort) -> "ExperimentSpec":
        """Fill in defaulted dates from ``cohort`` and check invariants."""
        end = self.validation_end or cohort.period[1]
        split = self.split_date or add_months(end, -2)
        spec = replace(self, split_date=split, validation_end=end)
        spec.validate(cohort)
        return spec

    def validate(self, cohort: Cohort | None = None) -> None:
        if self.split_date and self.validation_end and not self.split_date < self.validation_end:
            raise ConfigError("split_date", "must precede validation_end")
        if cohort is not None and self.validation_end and self.validation_end > cohort.period[1]:
            raise ConfigError("validation_end", f"after the end of the data ({cohort.period[1]})")
        if cohort is not None and self.snapshot and self.snapshot < cohort.period[0]:
            raise ConfigError("horizon_days", "training snapshot falls before the start of the data")
        for c in self.exclusion_combos:
            for name in c:
                if name not in SEGMENTS:
                    raise ConfigError("exclusion_combos", f"unknown segment {name!r}")
        combos = [tuple(sorted(c, key=SEGMENTS.index)) for c in self.exclusion_combos]
        if len(set(combos)) != len(combos):
            raise ConfigError("exclusion_combos", "combos must be unique")
        for key, values, allowed in (("families", self.families, FAMILIES), ("kinds", self.kinds, KINDS),
                                     ("axes", self.axes, AXES)):
            if not values or len(set(values)) != len(values) or any(v not in allowed for v in values):
                raise ConfigError(key, f"must be distinct values from {allowed}")
        if self.horizon_days is not None and self.horizon_days < 1:
            raise ConfigError("horizon_days", "must be >= 1")

    @property
    def horizon(self) -> int:
        if self.horizon_days is not None:
            return self.horizon_days
        return (self.validation_end - self.split_date).days

    @property
    def snapshot(self) -> date | None:
        if self.split_date is None or (self.validation_end is None and self.horizon_days is None):
            return None
        return self.split_date - timedelta(days=self.horizon)

    def columns(self) -> list[tuple[str, str, str | None]]:
        cols = []
        if "binary" in self.families:
            cols += [("binary", k, None) for k in self.kinds]
        if "survival" in self.families:
            cols += [("survival", k, a) for k in self.kinds for a in self.axes]
        return cols

    def to_dict(self) -> dict:
        return {
            "split_date": self.split_date.isoformat() if self.split_date else None,
            "validation_end": self.validation_end.isoformat() if self.validation_end else None,
            "horizon_days": self.horizon_days,
            "exclusion_combos": [list(c) for c in self.exclusion_combos],
            "families": list(self.families),
            "kinds": list(self.kinds),
            "axes": list(self.axes),
            "forest": asdict(self.forest),
            "rules": self.rules.to_dict(),
            "seed": self.seed,
            "vip_only": self.vip_only,
            "type_flags": self.type_flags,
            "ipcw": self.ipcw,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        check_keys(data, cls.__dataclass_fields__)
        kw = dict(data)
        for key in ("split_date", "validation_end"):
            if kw.get(key) is not None:
                try:
                    kw[key] = date.fromisoformat(kw[key])
                except (TypeError, ValueError):
                    raise ConfigError(key, f"not an ISO date: {kw[key]!r}") from None
        if "exclusion_combos" in kw:
            if not isinstance(kw["exclusion_combos"], list) or not all(isinstance(c, list) for c in kw["exclusion_combos"]):
                raise ConfigError("exclusion_combos", "must be a list of lists of segment names")
            kw["exclusion_combos"] = tuple(tuple(c) for c in kw["exclusion_combos"])
        for key in ("families", "kinds", "axes"):
            if key in kw:
                if not isinstance(kw[key], list):
                    raise ConfigError(key, "must be a list")
                kw[key] = tuple(kw[key])
        for key, kind in (("forest", ForestParams), ("rules", ProfilingRules)):
            if key in kw:
                if not isinstance(kw[key], dict):
                    raise ConfigError(key, "must be an object")
                check_keys(kw[key], kind.__dataclass_fields__, f"{key}.")
                try:
                    kw[key] = kind(**kw[key])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(key, str(exc)) from None
        for key in ("seed", "horizon_days"):
            if kw.get(key) is not None and (not isinstance(kw[key], int) or isinstance(kw[key], bool)):
                raise ConfigError(key, "must be an integer")
        spec = cls(**kw)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(read_json_object(path))


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class KindData:
    """Training and validation arrays for one churn kind."""

    train_ids: list[str]
    train_labels: dict[str, frozenset[str]]  # ever labels as of split_date
    X_train: np.ndarray
    y_train: np.ndarray  # binary churn within the horizon
    train_surv: dict[str, tuple[np.ndarray, np.ndarray]]  # axis -> (times, events)
    val_ids: list[str]
    X_val: np.ndarray
    y_val: np.ndarray
    val_surv: dict[str, tuple[np.ndarray, np.ndarray]]


@dataclass
class ExperimentData:
    spec: ExperimentSpec
    kinds: dict[str, KindData]
    validation_ids: list[str]  # frozen normal-only validation cohort
    feature_names: tuple[str, ...]

    @property
    def validation_hash(self) -> str:
        return cohort_hash(self.validation_ids)

    def training_rows(self, kind: str, exclude: Sequence[str]) -> np.ndarray:
        d = self.kinds[kind]
        drop = set(exclude)
        return np.array([i for i, pid in enumerate(d.train_ids) if not (d.train_labels[pid] & drop)], dtype=np.int64)


def _churn_within(state: StateTimeline, kinds, start: date, horizon: int, observed: date) -> bool:
    """Does a surviving churn gap open in ``(start, start + horizon]`` and get noticed by ``observed``?"""
    lo, hi = start.toordinal(), start.toordinal() + horizon
    for ep in state.episodes:
        if ep.kind in kinds and ep.detected <= observed and lo < ep.start.toordinal() + 1 <= hi:
            return True
    return False


def _eligible(state: StateTimeline, kind: str, day: date) -> bool:
    i = day.toordinal() - state.first_login.toordinal()
    if not 0 <= i < len(state.login):
        return False
    if kind == "login":
        return state.login[i] == ACTIVE
    return state.purchase[i] == PAYING


def _samples_by_id(cohort, states, axis, kind, cutoff):
    try:
        samples = to_survival_samples(cohort, states, axis, kind, cutoff)
    except ValueError:
        return {}
    return {s.player_id: (s.time, s.event) for s in samples}


def prepare_data(cohort: Cohort, spec: ExperimentSpec) -> ExperimentData:
    """Label, featurise and split ``cohort`` once for every cell of the experiment."""
    spec = spec.resolve(cohort)
    if spec.vip_only:
        _, vips = select_vip(cohort, observation_window=default_vip_window(cohort))
        cohort = cohort.subset(vips)
    split, end, snap, horizon = spec.split_date, spec.validation_end, spec.snapshot, spec.horizon
    at_split = cohort.truncate(split)
    at_end = cohort.truncate(end)
    states_split = label_cohort(at_split, spec.rules)
    states_end = label_cohort(at_end, spec.rules)
    labels = {pid: st.ever_labels for pid, st in states_split.items()}

    validation_ids = [
        pid for pid, st in sorted(states_split.items())
        if not st.ever_labels and _eligible(st, "login", split)
    ]
    flags_of = (lambda ids: [labels[p] for p in ids]) if spec.type_flags else (lambda ids: None)

    kinds = {}
    for kind in spec.kinds:
        churn_kinds = _LOGIN_CHURN if kind == "login" else _PURCHASE_CHURN
        train_ids = [pid for pid, st in sorted(states_split.items()) if _eligible(st, kind, snap)]
        val_ids = [pid for pid in validation_ids if _eligible(states_split[pid], kind, split)]
        train_surv, val_surv = {}, {}
        for axis in spec.axes:
            tr = _samples_by_id(at_split, states_split, axis, kind, split)
            va = _samples_by_id(at_end, states_end, axis, kind, end)
            train_surv[axis] = (np.array([tr[p][0] for p in train_ids], dtype=float),
                                np.array([tr[p][1] for p in train_ids], dtype=bool))
            val_surv[axis] = (np.array([va[p][0] for p in val_ids], dtype=float),
                              np.array([va[p][1] for p in val_ids], dtype=bool))
        kinds[kind] = KindData(
            train_ids=train_ids,
            train_labels={p: labels[p] for p in train_ids},
            X_train=feature_matrix([at_split[p] for p in train_ids], snap, flags_of(train_ids)),
            y_train=np.array([_churn_within(states_split[p], churn_kinds, snap, horizon, split) for p in train_ids],
                             dtype=float),
            train_surv=train_surv,
            val_ids=val_ids,
            X_val=feature_matrix([at_split[p] for p in val_ids], split, flags_of(val_ids)),
            y_val=np.array([_churn_within(states_end[p], churn_kinds, split, horizon, end) for p in val_ids],
                           dtype=float),
            val_surv=val_surv,
        )
    names = FEATURE_NAMES + (TYPE_FLAG_NAMES if spec.type_flags else ())
    return ExperimentData(spec, kinds, validation_ids, names)


# ---------------------------------------------------------------------------
# cells


@dataclass(frozen=True)
class CellKey:
    combo_index: int
    family: str
    kind: str
    axis: str | None

    @property
    def column(self) -> str:
        return column_name(self.family, self.kind, self.axis)


@dataclass
class CellResult:
    key: CellKey
    combo: tuple[str, ...]
    seed: int
    validation_hash: str
    n_train: int = 0
    n_eval: int = 0
    value: float | None = None
    error: str | None = None
    baselines: dict[str, float] = field(default_factory=dict)
    curve_csv: str | None = None

    def to_dict(self) -> dict:
        out = {
            "exclusion": combo_tag(self.combo),
            "column": self.key.column,
            "family": self.key.family,
            "kind": self.key.kind,
            "axis": self.key.axis,
            "seed": self.seed,
            "validation_hash": self.validation_hash,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
            "value": self.value,
            "error": self.error,
        }
        if self.baselines:
            out["baselines"] = self.baselines
        return out


def cell_seed(master: int, key: CellKey, spec: ExperimentSpec) -> int:
    """Per-cell seed from (master seed, combo, model family, kind, axis)."""
    axis_idx = AXES.index(key.axis) if key.axis else 0
    ss = np.random.SeedSequence([int(master), key.combo_index, FAMILIES.index(key.family), KINDS.index(key.kind),
                                 axis_idx])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def fit_cell(data: ExperimentData, key: CellKey, seed: int, *, workers: int = 1):
    """Fit the forest of one cell; returns ``(forest, training_rows)``."""
    spec = data.spec
    d = data.kinds[key.kind]
    rows = data.training_rows(key.kind, spec.exclusion_combos[key.combo_index])
    if len(rows) == 0:
        raise ValueError("exclusions leave no training rows")
    if key.family == "binary":
        response = BinaryResponse(d.y_train[rows])
    else:
        times, events = d.train_surv[key.axis]
        response = SurvivalResponse(times[rows], events[rows])
    forest = fit_forest(d.X_train[rows], response, spec.forest, seed, workers=workers,
                        feature_names=data.feature_names)
    return forest, rows


def evaluate_cell(data: ExperimentData, key: CellKey, forest):
    """AUC (binary) or prediction error curve (survival) on the validation cohort."""
    d = data.kinds[key.kind]
    if len(d.val_ids) == 0:
        raise ValueError("empty validation cohort")
    if key.family == "binary":
        return auc(predict_probability(forest, d.X_val), d.y_val)
    return error_curves(forest, d.X_val, d.val_surv[key.axis], kind=key.kind, axis=key.axis, ipcw=data.spec.ipcw)


def run_cell(data: ExperimentData, key: CellKey) -> CellResult:
    spec = data.spec
    combo = tuple(spec.exclusion_combos[key.combo_index])
    result = CellResult(key, combo, cell_seed(spec.seed, key, spec), data.validation_hash)
    result.n_eval = len(data.kinds[key.kind].val_ids)
    try:
        forest, rows = fit_cell(data, key, result.seed)
        result.n_train = len(rows)
        outcome = evaluate_cell(data, key, forest)
    except ValueError as exc:
        result.n_train = len(data.training_rows(key.kind, combo))
        result.error = str(exc)
        log.warning("cell %s/%s failed: %s", combo_tag(combo), key.column, exc)
        return result
    if key.family == "binary":
        result.value = float(outcome)
    else:
        result.value = outcome.ibs
        result.baselines = {name: ibs for name, (_, ibs) in outcome.baselines.items()}
        buf = io.StringIO()
        outcome.to_csv(buf)
        result.curve_csv = buf.getvalue()
    return result


# ---------------------------------------------------------------------------
# table


@dataclass
class ResultsTable:
    spec: ExperimentSpec
    cells: dict[tuple[int, str], CellResult]
    validation_hash: str
    n_validation: int
    cohort_size: int

    @property
    def combos(self) -> tuple[tuple[str, ...], ...]:
        return self.spec.exclusion_combos

    @property
    def column_names(self) -> list[str]:
        return [column_name(*c) for c in self.spec.columns()]

    def value(self, combo: Sequence[str], column: str) -> float | None:
        idx = [tuple(c) for c in self.combos].index(tuple(combo))
        return self.cells[(idx, column)].value

    def best(self) -> dict[str, list[str]]:
        """Per column, the exclusion tags attaining the minimum IBS or maximum AUC."""
        out = {}
        for col in self.column_names:
            vals = {i: self.cells[(i, col)].value for i in range(len(self.combos))}
            vals = {i: v for i, v in vals.items() if v is not None}
            if not vals:
                out[col] = []
                continue
            target = max(vals.values()) if col.startswith("auc_") else min(vals.values())
            out[col] = [combo_tag(self.combos[i]) for i, v in vals.items() if v == target]
        return out

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "validation_hash": self.validation_hash,
            "n_validation": self.n_validation,
            "cohort_size": self.cohort_size,
            "columns": self.column_names,
            "rows": [combo_tag(c) for c in self.combos],
            "best": self.best(),
            "cells": [self.cells[k].to_dict() for k in sorted(self.cells)],
        }


_DATA: ExperimentData | None = None


def _run_global(key: CellKey) -> CellResult:
    return run_cell(_DATA, key)


def run_experiment(cohort: Cohort, spec: ExperimentSpec = ExperimentSpec(), *, workers: int = 1) -> ResultsTable:
    """Run every (combo, family, kind, axis) cell; the table does not depend on ``workers``."""
    global _DATA
    data = prepare_data(cohort, spec)
    keys = [CellKey(i, fam, kind, axis) for i in range(len(data.spec.exclusion_combos))
            for fam, kind, axis in data.spec.columns()]
    if workers > 1 and len(keys) > 1:
        # forked workers inherit the prepared data instead of pickling it per task
        _DATA = data
        try:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                results = list(pool.map(_run_global, keys))
        finally:
            _DATA = None
    else:
        results = [run_cell(data, k) for k in keys]
    cells = {(r.key.combo_index, r.key.column): r for r in results}
    return ResultsTable(data.spec, cells, data.validation_hash, len(data.validation_ids), len(cohort))


def _fmt(v: float | None) -> str:
    return "NA" if v is None else f"{v:.6f}"


def emit_reports(table: ResultsTable, out_dir) -> list[Path]:
    """Write ``results.csv``, ``results.json`` and ``curves/curves_<kind>_<axis>_<combo>.csv``."""
    if not table.cells:
        raise ValueError("empty results table")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "curves").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    cols = table.column_names
    with open(out / "results.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["exclusion"] + cols)
        for i, combo in enumerate(table.combos):
            writer.writerow([combo_tag(combo)] + [_fmt(table.cells[(i, c)].value) for c in cols])
    written.append(out / "results.csv")
    (out / "results.json").write_text(json.dumps(table.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    written.append(out / "results.json")
    for (i, col), cell in sorted(table.cells.items()):
        if cell.curve_csv is None:
            continue
        path = out / "curves" / f"curves_{cell.key.kind}_{cell.key.axis}_{combo_tag(cell.combo)}.csv"
        path.write_text(cell.curve_csv, encoding="utf-8")
        written.append(path)
    return written
