"""``conformal-forest`` command line: fit, predict, evaluate, benchmark.

Exit status is 0 on success, 2 when input fails validation and 1 on any
other error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import errors
from ._rng import derive_seed
from .datasets import load_csv, make_blobs, make_linear, read_csv_rows
from .engine import PredictionIntervals
from .estimator import AUTO, ConformalForest, RunConfig
from .forest import Dataset, Task
from .metrics import evaluate_intervals, evaluate_sets

logger = logging.getLogger("conformal_forest")

SET_SEPARATOR = "|"


# -- argument plumbing -------------------------------------------------------


def _int_or_auto(text: str):
    return AUTO if text == AUTO else int(text)


def _float_or_auto(text: str):
    return AUTO if text == AUTO else float(text)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (overrides --config)")
    g.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
    g.add_argument("--task", choices=[t.value for t in Task])
    g.add_argument("--method", choices=["split", "cv", "bootstrap"])
    g.add_argument("--alpha", type=float, nargs="+", help="miscoverage level(s)")
    g.add_argument("--n-estimators", type=int)
    g.add_argument("--cv-folds", type=int)
    g.add_argument("--k-init", type=_int_or_auto, help='integer or "auto"')
    g.add_argument("--lambda-init", type=_float_or_auto, help='number or "auto"')
    g.add_argument("--randomized", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--allow-empty-sets", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--resample-n-estimators", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--bootstrap-size", type=int)
    g.add_argument("--calib-fraction", type=float)
    g.add_argument("--tuning-fraction", type=float)
    g.add_argument("--max-features", type=int)
    g.add_argument("--min-samples-leaf", type=int)
    g.add_argument("--max-depth", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, help="worker threads (default: all)")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config is not None:
        values.update(json.loads(args.config.read_text()))
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise errors.ValidationError(f"unknown config keys: {sorted(unknown)}")
    for name in known:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _fmt(x: float) -> str:
    return repr(float(x))


# -- fit ---------------------------------------------------------------------


def cmd_fit(args) -> int:
    cfg = config_from_args(args)
    data = load_csv(args.train, args.target, cfg.task)
    est = ConformalForest(cfg).fit(data)
    est.save(args.bundle)
    manifest_path = args.manifest or Path(args.bundle).with_suffix(".manifest.json")
    doc = {"config": cfg.persisted(), "resolved": est.manifest_}
    Path(manifest_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %s and %s", args.bundle, manifest_path)
    return 0


# -- predict -------------------------------------------------------------------


def _test_features(path, schema: dict) -> np.ndarray:
    names = schema["feature_names"]
    header, _ = read_csv_rows(path)
    if names is None or any(n not in header for n in names):
        raise errors.SchemaMismatch(f"{path} lacks the training feature columns {names}")
    return load_csv(path, None, schema["task"], feature_columns=names).features


def format_predictions(result, schema: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if isinstance(result, PredictionIntervals):
        w.writerow(["prediction", "lo", "hi"])
        for p, lo, hi in zip(result.prediction, result.lo, result.hi):
            w.writerow([_fmt(p), _fmt(lo), _fmt(hi)])
    else:
        labels = schema["class_labels"] or [str(c) for c in range(schema["n_classes"])]
        w.writerow(["prediction", "set"])
        for j, row in enumerate(result.sets):
            members = SET_SEPARATOR.join(labels[c] for c in np.flatnonzero(row))
            w.writerow([labels[int(result.prediction[j])], members])
    return buf.getvalue()


def cmd_predict(args) -> int:
    est = ConformalForest.load(args.bundle)
    if args.threads is not None:
        est.config.threads = args.threads
    X = _test_features(args.test, est.schema_)
    alpha = args.alpha if args.alpha is not None else est.config.alpha[0]
    result = est.predict(X, alpha=alpha, chunk_size=args.chunk_size)
    text = format_predictions(result, est.schema_)
    if args.output is None or str(args.output) == "-":
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
    return 0


# -- evaluate ------------------------------------------------------------------


def evaluate_files(predictions, truth, target: str):
    header, rows = read_csv_rows(predictions)
    t_header, t_rows = read_csv_rows(truth)
    if target not in t_header:
        raise errors.MissingColumn(f"target column {target!r} not in {truth}")
    if len(rows) != len(t_rows):
        raise errors.LengthMismatch(f"{len(rows)} predictions vs {len(t_rows)} truth rows")
    truth_raw = [r[t_header.index(target)].strip() for r in t_rows]
    if "set" in header:
        col = header.index("set")
        sets = [[s for s in r[col].split(SET_SEPARATOR) if s] for r in rows]
        vocab = {lab: i for i, lab in enumerate(sorted(set(truth_raw).union(*map(set, sets))))}
        y = np.array([vocab[v] for v in truth_raw], dtype=np.int64)
        return evaluate_sets([[vocab[s] for s in row] for row in sets], y)
    if "lo" in header and "hi" in header:
        lo = np.array([float(r[header.index("lo")]) for r in rows])
        hi = np.array([float(r[header.index("hi")]) for r in rows])
        try:
            y = np.array([float(v) for v in truth_raw])
        except ValueError:
            raise errors.NonNumericFeature(f"non-numeric regression target in {truth}") from None
        return evaluate_intervals(np.column_stack([lo, hi]), y)
    raise errors.SchemaMismatch(f"{predictions} has neither a 'set' column nor 'lo'/'hi' columns")


def cmd_evaluate(args) -> int:
    report = evaluate_files(args.predictions, args.truth, args.target)
    # strict JSON has no infinity; spell it like the predictions CSV does
    d = {k: (_fmt(v) if isinstance(v, float) and not math.isfinite(v) else v)
         for k, v in report.to_dict().items()}
    width = max(len(k) for k in d)
    for k, v in d.items():
        print(f"{k:<{width}}  {v}")
    print(json.dumps(d, sort_keys=True, allow_nan=False))
    if args.json is not None:
        Path(args.json).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    return 0


# -- benchmark -----------------------------------------------------------------

BENCH_COLUMNS = ["trial", "method", "alpha", "coverage", "mean_size_or_length", "fit_seconds",
                 "predict_seconds"]


def _trial_data(args, task: Task, trial_seed: int, pool: Dataset | None) -> tuple[Dataset, Dataset]:
    n = args.n_train + args.n_test
    if args.generator == "blobs":
        data = make_blobs(n, args.n_classes, args.n_features, seed=trial_seed)
    elif args.generator == "linear":
        data = make_linear(n, args.n_features, args.noise, seed=trial_seed)
    else:
        if n > pool.n_samples:
            raise errors.ValidationError(f"n_train + n_test = {n} exceeds the {pool.n_samples} CSV rows")
        idx = np.random.default_rng(trial_seed).permutation(pool.n_samples)[:n]
        data = pool.subset(idx)
    if data.task is not task:
        raise errors.TaskMismatch(f"generator {args.generator} yields {data.task.value} data")
    return data.subset(np.arange(args.n_train)), data.subset(np.arange(args.n_train, n))


def run_benchmark(args) -> list[dict]:
    base = config_from_args(args)
    task = Task(base.task)
    pool = None
    if args.generator == "csv":
        if args.data is None or args.target is None:
            raise errors.ValidationError("--generator csv needs --data and --target")
        pool = load_csv(args.data, args.target, task)
    methods = args.methods or [base.method]
    rows = []
    for trial in range(args.n_trials):
        trial_seed = derive_seed(base.seed, trial)
        train, test = _trial_data(args, task, trial_seed, pool)
        for method in methods:
            cfg = RunConfig(**{**asdict(base), "method": method, "seed": trial_seed})
            t0 = time.perf_counter()
            est = ConformalForest(cfg).fit(train)
            fit_s = time.perf_counter() - t0
            for a in cfg.alpha:
                t0 = time.perf_counter()
                result = est.predict(test.features, alpha=a)
                pred_s = time.perf_counter() - t0
                if task is Task.REGRESSION:
                    rep = evaluate_intervals(result, test.targets)
                else:
                    rep = evaluate_sets(result, test.targets)
                rows.append({"trial": trial, "method": method, "alpha": a, "coverage": rep.coverage,
                             "mean_size_or_length": rep.mean_size_or_length,
                             "fit_seconds": fit_s, "predict_seconds": pred_s})
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    out = []
    keys = sorted({(r["method"], r["alpha"]) for r in rows}, key=lambda k: (k[0], k[1]))
    for method, a in keys:
        sel = [r for r in rows if r["method"] == method and r["alpha"] == a]
        out.append({"trial": "mean", "method": method, "alpha": a,
                    **{c: float(np.mean([r[c] for r in sel])) for c in BENCH_COLUMNS[3:]}})
    return out


def cmd_benchmark(args) -> int:
    if args.n_trials < 1:
        raise errors.ValidationError("n_trials must be >= 1")
    rows = run_benchmark(args)
    buf = io.StringIO()
    w = csv.DictWriter(buf, BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows + summarize(rows):
        w.writerow({k: (_fmt(v) if isinstance(v, float) and k != "alpha" else v) for k, v in r.items()})
    if args.output is None or str(args.output) == "-":
        sys.stdout.write(buf.getvalue())
    else:
        Path(args.output).write_text(buf.getvalue())
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conformal-forest",
                                     description="Conformal prediction with random forests.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit and calibrate, write a bundle and run manifest")
    p.add_argument("--train", type=Path, required=True, help="training CSV with header")
    p.add_argument("--target", required=True, help="target column name")
    p.add_argument("--bundle", type=Path, required=True, help="output bundle (.npz)")
    p.add_argument("--manifest", type=Path, help="run manifest JSON (default: <bundle>.manifest.json)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="prediction sets or intervals for a test CSV")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True, help="CSV holding the training feature columns")
    p.add_argument("--alpha", type=float, help="miscoverage level (default: first fitted alpha)")
    p.add_argument("--output", type=Path, help="output CSV (default: stdout)")
    p.add_argument("--threads", type=int)
    p.add_argument("--chunk-size", type=int, help="test points per scoring batch (cross methods)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="coverage and mean size/length of a predictions file")
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--json", type=Path, help="also write the report to this file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="Monte Carlo coverage/size table over seeded trials")
    p.add_argument("--n-trials", type=int, default=10)
    p.add_argument("--generator", choices=["blobs", "linear", "csv"], default="blobs")
    p.add_argument("--methods", nargs="+", choices=["split", "cv", "bootstrap"],
                   help="methods to compare (default: --method)")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--n-classes", type=int, default=10)
    p.add_argument("--n-features", type=int, default=5)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--data", type=Path, help="CSV to resample (--generator csv)")
    p.add_argument("--target", help="target column of --data")
    p.add_argument("--output", type=Path, help="output CSV (default: stdout)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except errors.ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
