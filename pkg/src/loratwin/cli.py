"""Command-line entry point: ``loratwin <command> ...``.

Failures print one line ``error: <kind>: <message>`` to stderr and exit 1;
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import DEFAULT_CONFIG_ENV, ServerConfig
from .errors import FittingError, LoraTwinError, ValidationError
from .estimators import H100_SYNTHETIC, Estimators, fit_estimators
from .workload import LengthSpec, WorkloadSpec

log = logging.getLogger("loratwin")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _read_json(path):
    try:
        with Path(path).open() as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(str(path), f"invalid JSON: {exc.msg} at line {exc.lineno}") from None


def _write_json(path, doc, schema: str | None = None):
    if schema:
        from .schemas import validate

        validate(json.loads(json.dumps(doc)), schema)
    text = json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_config(path, slots=None) -> ServerConfig:
    if path:
        cfg = ServerConfig.load(path)
    else:
        import os

        cfg = ServerConfig.load() if os.environ.get(DEFAULT_CONFIG_ENV) else ServerConfig(slots=slots or 1)
    return cfg.with_slots(slots) if slots else cfg


def _lengths(args) -> LengthSpec:
    return LengthSpec.mean(args.in_len_mean, args.in_len_std, args.out_len_mean, args.out_len_std)


def _add_lengths(p):
    p.add_argument("--in-len-mean", type=float, default=250.0)
    p.add_argument("--in-len-std", type=float, default=180.0)
    p.add_argument("--out-len-mean", type=float, default=231.0)
    p.add_argument("--out-len-std", type=float, default=170.0)


def _condition(args):
    from .placement import Condition

    if len(args.rates) != len(args.ranks):
        raise ValidationError("condition", "--rates and --ranks need the same number of values")
    return Condition(tuple(args.rates), tuple(args.ranks), _lengths(args))


# --------------------------------------------------------------------------
# commands


def cmd_fit(args):
    base = Estimators.from_json(_read_json(args.base)["estimators"]) if args.base else H100_SYNTHETIC
    report = fit_estimators(base, sched=args.sched, model=args.model, adapters=args.adapters,
                            load=args.load, memory=args.memory, sched_intercept=args.sched_intercept)
    cfg = ServerConfig(slots=args.slots, estimators=report.estimators)
    _write_json(args.out, cfg.to_json(), "server_config")
    if args.report:
        _write_json(args.report, {"fitted": report.fitted, "sched_intercept": report.sched_intercept})
    return 0


def cmd_simulate(args):
    from .engine import run_simulation
    from .metrics import compute_metrics

    wl = WorkloadSpec.load(args.workload)
    if args.seed is not None:
        wl = replace(wl, seed=args.seed)
    cfg = _load_config(args.config, args.slots)
    res = run_simulation(wl, cfg, args.mode, backend=args.backend, record_tokens=not args.no_requests,
                         record_iterations=bool(args.trace))
    res.metrics = compute_metrics(res, wl)
    _write_json(args.out, res.to_json(include_requests=not args.no_requests), "simulation_result")
    if args.trace:
        with Path(args.trace).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "iteration", "r_running", "r_waiting", "a_running", "lat_step", "loads"])
            for row in res.iteration_rows():
                w.writerow([repr(float(row[0])), *(int(v) for v in row[1:5]), repr(float(row[5])), int(row[6])])
    return 0


def _n_grid(args):
    from .placement import DEFAULT_N_GRID

    return tuple(args.n_grid) if args.n_grid else DEFAULT_N_GRID


def _g_grid(args):
    from .placement import full_g_grid

    if args.g_grid == "full":
        return full_g_grid
    if args.g_grid == "equal":
        return lambda n: [n]
    if args.g_grid in (None, "default"):
        return None
    return _ints(args.g_grid)


def cmd_sweep(args):
    from .placement import encode_workload, sweep_optimal

    cond = _condition(args)
    cfg = _load_config(args.config)
    t0 = time.perf_counter()
    res = sweep_optimal(cond, cfg, _n_grid(args), _g_grid(args), args.duration, args.seed,
                        early_exit=None if args.no_early_exit else args.early_exit, drain=args.drain,
                        backend=args.backend, jobs=args.jobs)
    doc = res.to_json()
    doc["condition"] = cond.canonical()
    doc["features"] = encode_workload(cond).as_dict()
    doc["metadata"] = {"wall_time_s": time.perf_counter() - t0}
    _write_json(args.out, doc, "placement_result")
    return 0


def cmd_gen_dataset(args):
    from .placement import condition_grid, generate_dataset

    conds = condition_grid(args.rates, args.ranks, args.size, args.rate_repetition,
                           not args.no_rank_repetition, _lengths(args))
    if args.limit:
        conds = conds[: args.limit]
    print(f"conditions: {len(conds)}", file=sys.stderr)
    cfg = _load_config(args.config)
    rep = generate_dataset(conds, cfg, args.out, n_values=_n_grid(args), g_values=_g_grid(args),
                           duration=args.duration, seed=args.seed,
                           early_exit=None if args.no_early_exit else args.early_exit,
                           jobs=args.jobs, backend=args.backend)
    print(f"written: {rep.written}  skipped: {rep.skipped_existing}  failed: {len(rep.failed)}", file=sys.stderr)
    return 1 if rep.failed else 0


def _train_one(payload):
    from .predictor import train_forest

    X, y, target, kwargs = payload
    return target, train_forest(X, y, target=target, **kwargs)


def cmd_train(args):
    from .placement import TARGET_NAMES, dataset_arrays, read_dataset, split_rows
    from .predictor import PlacementModel, array_hash, evaluate, train_linear_baseline

    rows = read_dataset(args.dataset)
    if not rows:
        raise ValidationError(str(args.dataset), "dataset is empty")
    train, test = split_rows(rows, args.test_fraction)
    Xtr, ytr, _ = dataset_arrays(train)
    kwargs = dict(n_trees=args.trees, max_depth=args.depth, min_leaf=args.min_leaf,
                  feature_subset_size=args.max_features, seed=args.seed,
                  dataset_hash=array_hash(Xtr, np.concatenate([ytr[t] for t in TARGET_NAMES])))
    payloads = [(Xtr, ytr[t], t, kwargs) for t in TARGET_NAMES]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            forests = dict(pool.map(_train_one, payloads))
    else:
        forests = dict(map(_train_one, payloads))
    model = PlacementModel({t: forests[t] for t in TARGET_NAMES})
    evaluation = {"train_rows": len(train), "test_rows": len(test), "test_fraction": args.test_fraction,
                  "forest": {}, "linear": {}}
    Xte, yte, _ = dataset_arrays(test) if test else (None, None, None)
    for t in TARGET_NAMES:
        evaluation["forest"][t] = {"train_smape_pct": evaluate(model.forests[t], Xtr, ytr[t]),
                                   "test_smape_pct": evaluate(model.forests[t], Xte, yte[t]) if test else None}
        try:
            lin = train_linear_baseline(Xtr, ytr[t], target=t)
        except FittingError as exc:  # too few rows for the baseline; the forest is still usable
            evaluation["linear"][t] = {"train_smape_pct": None, "test_smape_pct": None, "error": str(exc)}
            continue
        evaluation["linear"][t] = {"train_smape_pct": evaluate(lin, Xtr, ytr[t]),
                                   "test_smape_pct": evaluate(lin, Xte, yte[t]) if test else None}
    model.evaluation = evaluation
    _write_json(args.out, model.to_json(), "forest_model")
    if args.report:
        _write_json(args.report, evaluation)
    for t in TARGET_NAMES:
        f, lin = evaluation["forest"][t], evaluation["linear"][t]
        print(f"{t:15s} forest test SMAPE {_pct(f['test_smape_pct'])}  linear {_pct(lin['test_smape_pct'])}",
              file=sys.stderr)
    return 0


def _pct(v):
    return "n/a" if v is None else f"{v:.2f}%"


def cmd_predict(args):
    from .placement import encode_workload
    from .predictor import PlacementModel

    model = PlacementModel.load(args.model)
    if args.features:
        feats = _read_json(args.features)
    else:
        if not args.rates or not args.ranks:
            raise ValidationError("features", "give --features or both --rates and --ranks")
        feats = encode_workload(_condition(args)).as_dict()
    t0 = time.perf_counter()
    out = model.predict(feats)
    doc = {"max_throughput_tok_s": out.get("max_throughput"), "n_star": out.get("n_star"),
           "g_star": out.get("g_star"), "features": feats,
           "metadata": {"predict_time_ms": (time.perf_counter() - t0) * 1e3}}
    _write_json(args.out, doc)
    return 0


def cmd_rules(args):
    from .predictor import PlacementModel, extract_rules

    model = PlacementModel.load(args.model)
    targets = [args.target] if args.target else list(model.forests)
    for t in targets:
        if t not in model.forests:
            raise ValidationError("target", f"model has no forest for {t!r}")
        forest = model.forests[t]
        for rule in extract_rules(forest):
            if args.tree is None or rule.tree == args.tree:
                print(rule.text(forest.feature_names, t))
    return 0


def cmd_compare(args):
    from .metrics import compare_traces, format_report, load_dt_metrics, load_real_trace

    report = compare_traces(load_dt_metrics(args.dt), load_real_trace(args.real))
    if args.out:
        _write_json(args.out, report)
    print(format_report(report))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .placement import DEFAULT_DURATION_S, GRID_RANKS, GRID_RATES

    p = argparse.ArgumentParser(prog="loratwin", description="Digital twin of multi-adapter LLM serving.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit", help="fit estimator coefficients from benchmark CSVs")
    s.add_argument("--base", help="server config JSON whose estimators are the starting point")
    for name in ("sched", "model", "adapters", "load", "memory"):
        s.add_argument(f"--{name}", help=f"{name} benchmark CSV")
    s.add_argument("--sched-intercept", action="store_true")
    s.add_argument("--slots", type=int, default=8)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run the twin on one workload")
    s.add_argument("--workload", required=True)
    s.add_argument("--config")
    s.add_argument("--slots", type=int)
    s.add_argument("--mode", choices=["full", "mean"])
    s.add_argument("--seed", type=int, help="override the workload seed")
    s.add_argument("--out", default="-")
    s.add_argument("--trace", help="per-iteration CSV")
    s.add_argument("--no-requests", action="store_true", help="omit per-request records")
    s.add_argument("--backend", choices=["native", "python"])
    s.set_defaults(func=cmd_simulate)

    def sweep_args(s):
        s.add_argument("--config")
        s.add_argument("--duration", type=float, default=DEFAULT_DURATION_S)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--n-grid", type=_ints)
        s.add_argument("--g-grid", help="'default', 'full', 'equal' or comma-separated slot counts")
        s.add_argument("--early-exit", type=int, default=3)
        s.add_argument("--no-early-exit", action="store_true")
        s.add_argument("--jobs", type=int, default=1)
        s.add_argument("--backend", choices=["native", "python"])
        _add_lengths(s)

    s = sub.add_parser("sweep", help="optimal (N, G) for one condition")
    s.add_argument("--rates", type=_floats, required=True)
    s.add_argument("--ranks", type=_ints, required=True)
    s.add_argument("--drain", action="store_true")
    s.add_argument("--out", default="-")
    sweep_args(s)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gen-dataset", help="sweep a grid of conditions into a CSV")
    s.add_argument("--rates", type=_floats, default=list(GRID_RATES))
    s.add_argument("--ranks", type=_ints, default=list(GRID_RANKS))
    s.add_argument("--size", type=int, default=3, help="templates per condition")
    s.add_argument("--rate-repetition", action="store_true")
    s.add_argument("--no-rank-repetition", action="store_true")
    s.add_argument("--limit", type=int)
    s.add_argument("--out", required=True)
    sweep_args(s)
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("train", help="train the placement forests")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--test-fraction", type=float, default=0.1)
    s.add_argument("--trees", type=int, default=10)
    s.add_argument("--depth", type=int, default=5)
    s.add_argument("--min-leaf", type=int, default=1)
    s.add_argument("--max-features", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="predict the placement of a condition")
    s.add_argument("--model", required=True)
    s.add_argument("--features", help="JSON object of the 16 features")
    s.add_argument("--rates", type=_floats)
    s.add_argument("--ranks", type=_ints)
    s.add_argument("--out", default="-")
    _add_lengths(s)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("rules", help="print the rules of a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--target")
    s.add_argument("--tree", type=int)
    s.set_defaults(func=cmd_rules)

    s = sub.add_parser("compare", help="SMAPE of twin metrics against a real trace")
    s.add_argument("--dt", required=True)
    s.add_argument("--real", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LoraTwinError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
