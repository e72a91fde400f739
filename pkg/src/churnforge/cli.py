"""``churnforge`` command line: simulate, ingest, calibrate, label, km, train, predict, evaluate, experiment.

Exit status is 0 on success, 1 on a domain error (a JSON object on stderr)
and 2 on a usage or configuration error. Every option can also be supplied
through an environment variable ``CHURNFORGE_<OPTION>`` (for example
``CHURNFORGE_SEED=7`` or ``CHURNFORGE_WORKERS=4``); explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import date
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    DEFAULT_MAX_FALSE,
    DEFAULT_MAX_MISSED,
    NoFeasibleWindow,
    calibrate_window,
    calibration_cohort,
    drift_check,
)
from .config import ConfigError, read_json_object
from .events import IngestError, load_any, parse_date, save_cohort, select_vip, default_vip_window
from .experiment import (
    CellKey,
    cell_seed,
    ExperimentSpec,
    combo_tag,
    emit_reports,
    evaluate_cell,
    fit_cell,
    prepare_data,
    run_experiment,
)
from .features import feature_matrix
from .forest import Forest, ForestParams, predict_probability, predict_survival
from .profiling import SEGMENTS, ProfilingRules, label_cohort, segment_cohort, write_episodes, write_states
from .simulator import SimConfig, simulate, write_outputs
from .survival import AXES, KINDS, km_stratified, write_km_csv

log = logging.getLogger("churnforge")

ENV_PREFIX = "CHURNFORGE_"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors suggest the closest known spelling."""

    def error(self, message):
        hint = _suggest(self, message)
        raise UsageError(f"{self.prog}: {message}{hint}")


def _all_options(parser: argparse.ArgumentParser) -> list[str]:
    opts = []
    for action in parser._actions:
        opts.extend(action.option_strings)
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                opts.extend(_all_options(sub))
    return opts


def _suggest(parser, message: str) -> str:
    if "unrecognized arguments:" in message:
        words = message.split("unrecognized arguments:", 1)[1].split()
        known = sorted(set(_all_options(parser)))
        hints = []
        for w in words:
            flag = w.split("=", 1)[0]
            close = difflib.get_close_matches(flag, known, n=1)
            if close:
                hints.append(f"{flag} -> did you mean {close[0]}?")
        return ("\n" + "\n".join(hints)) if hints else ""
    if "invalid choice:" in message and "choose from" in message:
        bad = message.split("invalid choice:", 1)[1].split("(", 1)[0].strip().strip("'")
        choices = [c.strip().strip("'") for c in message.split("choose from", 1)[1].strip(" )").split(",")]
        close = difflib.get_close_matches(bad, choices, n=1)
        return f"\ndid you mean {close[0]!r}?" if close else ""
    return ""


def _date(value: str) -> date:
    try:
        return parse_date(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {value!r}") from None


def _positive_int(value: str) -> int:
    try:
        v = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {value!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _segments(value: str) -> tuple[str, ...]:
    if value in ("", "none"):
        return ()
    names = tuple(v.strip() for v in value.split(",") if v.strip())
    for n in names:
        if n not in SEGMENTS:
            raise argparse.ArgumentTypeError(f"unknown segment {n!r}; use {', '.join(SEGMENTS)}")
    return names


def _grid(value: str) -> range:
    try:
        lo, hi = (int(v) for v in value.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("grid must look like LOW:HIGH") from None
    if not 1 <= lo <= hi:
        raise argparse.ArgumentTypeError("grid needs 1 <= LOW <= HIGH")
    return range(lo, hi + 1)


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, *, seed: bool = False, data: bool = True):
    if data:
        p.add_argument("--data", required=True, help="events file (CSV/JSONL, optionally .gz) or saved cohort directory")
    if seed:
        p.add_argument("--seed", type=int, help="master seed (required)")
    p.add_argument("--workers", type=_positive_int, default=1, help="parallel workers; never changes results")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _rules_args(p):
    p.add_argument("--rules", help="JSON file of profiling rule overrides")
    p.add_argument("--login-window", type=_positive_int)
    p.add_argument("--purchase-window", type=_positive_int)


def build_parser() -> Parser:
    parser = Parser(prog="churnforge", description="Churn definitions, player profiling and churn prediction.")
    parser.add_argument("--version", action="version", version=f"churnforge {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="generate a synthetic event log with planted truth")
    p.add_argument("--config", help="sim.json; defaults are used for missing keys")
    p.add_argument("--n-players", type=int)
    p.add_argument("--out", required=True)
    _common(p, seed=True, data=False)

    p = sub.add_parser("ingest", help="validate events and save a cohort directory")
    p.add_argument("--out", required=True)
    p.add_argument("--schema", help="JSON map of canonical column -> source column")
    p.add_argument("--start", type=_date)
    p.add_argument("--end", type=_date)
    p.add_argument("--error-budget", type=int, default=0)
    _common(p)

    p = sub.add_parser("calibrate", help="pick the churn window from false-churner and missed-sales rates")
    p.add_argument("--kind", choices=KINDS, default="login")
    p.add_argument("--grid", type=_grid, default=range(3, 91))
    p.add_argument("--max-false", type=float, default=DEFAULT_MAX_FALSE)
    p.add_argument("--max-missed", type=float, default=DEFAULT_MAX_MISSED)
    p.add_argument("--months", type=int, default=2, help="leading months used (0 = all data)")
    p.add_argument("--vip", action="store_true", help="restrict to the top-spend cohort first")
    p.add_argument("--drift", action="store_true", help="also report the rate over 6-month spans")
    p.add_argument("--out", help="write the calibration curve CSV here")
    _common(p)

    p = sub.add_parser("vip", help="select the top spenders providing half the revenue")
    p.add_argument("--share", type=float, default=0.5)
    p.add_argument("--out", help="write VIP player ids here")
    _common(p)

    p = sub.add_parser("label", help="per-day states, churn episodes and segment counts")
    p.add_argument("--as-of", type=_date)
    p.add_argument("--out", required=True)
    _rules_args(p)
    _common(p)

    p = sub.add_parser("km", help="Kaplan-Meier curves by player type")
    p.add_argument("--axis", choices=AXES, default="lifetime")
    p.add_argument("--kind", choices=KINDS, default="login")
    p.add_argument("--cutoff", type=_date)
    p.add_argument("--pooled", action="store_true", help="one curve over all players")
    p.add_argument("--out", required=True)
    _rules_args(p)
    _common(p)

    for name, text in (("train", "fit one model cell"), ("evaluate", "score a model on the validation cohort")):
        p = sub.add_parser(name, help=text)
        if name == "train":
            p.add_argument("--spec", help="experiment spec JSON (dates, rules, forest params)")
            p.add_argument("--family", choices=("binary", "survival"), default="survival")
            p.add_argument("--kind", choices=KINDS, default="login")
            p.add_argument("--axis", choices=AXES, default="lifetime")
            p.add_argument("--exclude", type=_segments, default=(), help="comma list of segments to drop")
            p.add_argument("--trees", type=_positive_int, help="ensemble size override")
            p.add_argument("--out", required=True, help="model path (.json or gzip otherwise)")
            _common(p, seed=True)
        else:
            p.add_argument("--model", required=True)
            p.add_argument("--out", required=True, help="output directory")
            _common(p)

    p = sub.add_parser("predict", help="churn probabilities or survival curves for players")
    p.add_argument("--model", required=True)
    p.add_argument("--as-of", type=_date, help="feature date (default: model's validation split date)")
    p.add_argument("--times", help="comma list of axis values for survival predictions")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("experiment", help="full exclusion experiment and reports")
    p.add_argument("--spec", help="experiment spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--trees", type=_positive_int, help="ensemble size override")
    _common(p, seed=True)
    return parser


def _apply_env(parser: argparse.ArgumentParser, environ) -> None:
    """Defaults from ``CHURNFORGE_<DEST>`` variables, converted like the flag would be."""
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _apply_env(sub, environ)
            continue
        if not action.option_strings or action.dest in ("help", "version"):
            continue
        key = ENV_PREFIX + action.dest.upper()
        if key not in environ:
            continue
        raw = environ[key]
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._CountAction):
            value = int(raw)
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{key}: {exc}") from None
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{key}: invalid choice {raw!r}")
        action.default = value
        action.required = False


# ---------------------------------------------------------------------------
# helpers


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _require_seed(args):
    if args.seed is None:
        raise UsageError(f"churnforge {args.command}: --seed is required (or set {ENV_PREFIX}SEED)")


def _rules(args) -> ProfilingRules:
    data = read_json_object(args.rules) if getattr(args, "rules", None) else {}
    if args.login_window:
        data["login_window"] = args.login_window
    if args.purchase_window:
        data["purchase_window"] = args.purchase_window
    try:
        return ProfilingRules.from_dict(data)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), "unknown key") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError("rules", str(exc)) from None


def _spec(args) -> ExperimentSpec:
    spec = ExperimentSpec.load(args.spec) if getattr(args, "spec", None) else ExperimentSpec()
    if getattr(args, "seed", None) is not None:
        spec = replace(spec, seed=args.seed)
    if getattr(args, "trees", None):
        spec = replace(spec, forest=replace(spec.forest, ensemble_size=args.trees))
    return spec


def _write_text(path, text: str) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    _require_seed(args)
    cfg = SimConfig.load(args.config) if args.config else SimConfig()
    if args.n_players is not None:
        cfg = replace(cfg, n_players=args.n_players).validate()
    log_, truth = simulate(cfg, args.seed)
    out = write_outputs(log_, truth, args.out)
    _emit({"events": str(out / "events.csv"), "truth": str(out / "truth.json"), "n_players": cfg.n_players,
           "n_records": len(log_), "seed": args.seed})


def cmd_ingest(args):
    schema = read_json_object(args.schema) if args.schema else None
    period = None
    if args.start or args.end:
        if not (args.start and args.end):
            raise UsageError("churnforge ingest: --start and --end go together")
        period = (args.start, args.end)
    cohort = load_any(args.data, schema=schema, period=period, error_budget=args.error_budget)
    save_cohort(cohort, args.out)
    _emit({"out": str(args.out), "n_players": len(cohort), "period": [d.isoformat() for d in cohort.period],
           "diagnostics": list(cohort.diagnostics)})


def cmd_calibrate(args):
    cohort = load_any(args.data)
    if args.vip:
        _, vips = select_vip(cohort, observation_window=default_vip_window(cohort))
        cohort = cohort.subset(vips)
    data = calibration_cohort(cohort, args.months) if args.months else cohort
    try:
        window, curve = calibrate_window(data, args.grid, args.max_false, args.max_missed, args.kind,
                                         workers=args.workers)
    except NoFeasibleWindow as exc:
        if args.out:
            exc.curve.to_csv(args.out)
        raise
    if args.out:
        curve.to_csv(args.out)
    report = {"kind": args.kind, "window": window, "n_players": len(data),
              "period": [d.isoformat() for d in data.period], "thresholds": [args.max_false, args.max_missed]}
    if args.drift:
        report["drift"] = [[d.isoformat(), r] for d, r in drift_check(cohort, window, args.kind)]
    _emit(report)


def cmd_vip(args):
    cohort = load_any(args.data)
    threshold, vips = select_vip(cohort, args.share, default_vip_window(cohort))
    if args.out:
        _write_text(args.out, "".join(f"{p}\n" for p in sorted(vips)))
    _emit({"threshold": threshold, "n_vip": len(vips), "n_players": len(cohort)})


def cmd_label(args):
    cohort = load_any(args.data)
    rules = _rules(args)
    as_of = args.as_of or cohort.period[1]
    known = cohort.truncate(as_of)
    states = label_cohort(known, rules)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "states.csv", "w", encoding="utf-8", newline="") as fh:
        write_states(states, fh)
    with open(out / "episodes.csv", "w", encoding="utf-8", newline="") as fh:
        write_episodes(states, fh)
    with open(out / "labels.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["player_id"] + list(SEGMENTS))
        for pid in sorted(states):
            d = states[pid].ever_label_dates
            writer.writerow([pid] + [d[s].isoformat() if s in d else "" for s in SEGMENTS])
    report = segment_cohort(cohort, rules, as_of).to_dict()
    report["rules"] = rules.to_dict()
    _write_text(out / "segments.json", json.dumps(report, indent=1, sort_keys=True) + "\n")
    _emit(report)


def cmd_km(args):
    cohort = load_any(args.data)
    rules = _rules(args)
    cutoff = args.cutoff or cohort.period[1]
    known = cohort.truncate(cutoff)
    states = label_cohort(known, rules)
    strata = (lambda st: "all") if args.pooled else None
    curves = km_stratified(known, states, args.axis, args.kind, cutoff, strata)
    buf_path = Path(args.out)
    buf_path.parent.mkdir(parents=True, exist_ok=True)
    with open(buf_path, "w", encoding="utf-8", newline="") as fh:
        write_km_csv(curves, fh)
    _emit({name: {"n": sc.n, "low_confidence": sc.low_confidence} for name, sc in curves.items()})


def _cell_key(spec: ExperimentSpec, family, kind, axis, exclude) -> tuple[ExperimentSpec, CellKey]:
    exclude = tuple(sorted(exclude, key=SEGMENTS.index))
    spec = replace(spec, exclusion_combos=(exclude,), families=(family,), kinds=(kind,),
                   axes=(axis,) if family == "survival" else spec.axes)
    return spec, CellKey(0, family, kind, axis if family == "survival" else None)


def cmd_train(args):
    _require_seed(args)
    cohort = load_any(args.data)
    spec, key = _cell_key(_spec(args), args.family, args.kind, args.axis, args.exclude)
    data = prepare_data(cohort, spec)
    seed = cell_seed(spec.seed, key, spec)
    forest, rows = fit_cell(data, key, seed, workers=args.workers)
    forest.meta = {
        "spec": data.spec.to_dict(),
        "family": key.family,
        "kind": key.kind,
        "axis": key.axis,
        "exclude": list(spec.exclusion_combos[0]),
        "training_players": [data.kinds[key.kind].train_ids[i] for i in rows],
        "snapshot": data.spec.snapshot.isoformat(),
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    forest.save(args.out)
    _emit({"model": str(args.out), "n_train": len(rows), "trees": len(forest.trees), "seed": seed,
           "exclude": combo_tag(spec.exclusion_combos[0])})


def _model_context(forest: Forest) -> tuple[ExperimentSpec, CellKey]:
    meta = forest.meta
    try:
        spec = ExperimentSpec.from_dict(meta["spec"])
    except KeyError:
        raise ValueError("model has no experiment metadata") from None
    return _cell_key(spec, meta["family"], meta["kind"], meta["axis"], meta["exclude"])


def cmd_predict(args):
    forest = Forest.load(args.model)
    cohort = load_any(args.data)
    spec, _ = _model_context(forest)
    as_of = args.as_of or spec.resolve(cohort).split_date
    known = cohort.truncate(as_of)
    ids = known.player_ids
    if not ids:
        raise ValueError(f"no players have logged in by {as_of}")
    if spec.type_flags:
        states = label_cohort(known, spec.rules)
        flags = [states[p].ever_labels for p in ids]
    else:
        flags = None
    X = feature_matrix([known[p] for p in ids], as_of, flags)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if forest.survival:
            if args.times:
                times = np.array(sorted(float(t) for t in args.times.split(",")))
            else:
                times = np.unique(np.percentile(forest.times, [10, 25, 50, 75, 90]))
            S = predict_survival(forest, X, times)
            writer.writerow(["player_id"] + [f"S_{t:g}" for t in times])
            for pid, row in zip(ids, S):
                writer.writerow([pid] + [repr(float(v)) for v in row])
        else:
            p = predict_probability(forest, X)
            writer.writerow(["player_id", "churn_probability"])
            for pid, v in zip(ids, p):
                writer.writerow([pid, repr(float(v))])
    _emit({"predictions": str(out), "n_players": len(ids), "as_of": as_of.isoformat()})


def cmd_evaluate(args):
    forest = Forest.load(args.model)
    cohort = load_any(args.data)
    spec, key = _model_context(forest)
    data = prepare_data(cohort, spec)
    outcome = evaluate_cell(data, key, forest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"validation_hash": data.validation_hash, "n_eval": len(data.kinds[key.kind].val_ids),
              "family": key.family, "kind": key.kind, "axis": key.axis,
              "exclude": combo_tag(spec.exclusion_combos[0])}
    if key.family == "binary":
        report["auc"] = float(outcome)
    else:
        report["ibs"] = outcome.ibs
        report["tau"] = outcome.tau
        report["baseline_ibs"] = {k: v for k, (_, v) in outcome.baselines.items()}
        with open(out / f"curve_{key.kind}_{key.axis}.csv", "w", encoding="utf-8", newline="") as fh:
            outcome.to_csv(fh)
    _write_text(out / "evaluation.json", json.dumps(report, indent=1, sort_keys=True) + "\n")
    _emit(report)


def cmd_experiment(args):
    _require_seed(args)
    cohort = load_any(args.data)
    spec = _spec(args)
    table = run_experiment(cohort, spec, workers=args.workers)
    written = emit_reports(table, args.out)
    _emit({"out": str(args.out), "files": len(written), "validation_hash": table.validation_hash,
           "best": table.best()})


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "calibrate": cmd_calibrate,
    "vip": cmd_vip,
    "label": cmd_label,
    "km": cmd_km,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
}


def _fail(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")


def main(argv=None, environ=None) -> int:
    environ = os.environ if environ is None else environ
    parser = build_parser()
    try:
        _apply_env(parser, environ)
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 2
    except ConfigError as exc:
        _fail("config", str(exc), key=exc.key)
        return 2
    except IngestError as exc:
        _fail("ingest", str(exc), diagnostics=list(exc.diagnostics)[:50])
        return 1
    except NoFeasibleWindow as exc:
        _fail("no_feasible_window", str(exc))
        return 1
    except (ValueError, KeyError, OSError) as exc:
        _fail(type(exc).__name__, str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
