"""Placement sweeps and training-set generation.

A condition is a small mix of adapter templates (rank, rate).  Serving N
adapters means cycling through the templates round-robin; the sweep runs the
twin over an (N, G) grid and keeps the highest-throughput point that is not
starved.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ServerConfig
from .engine import run_simulation
from .errors import ConfigError, ValidationError
from .metrics import compute_metrics
from .workload import AdapterSpec, LengthSpec, WorkloadSpec

log = logging.getLogger(__name__)

GRID_RATES = (3.2, 1.6, 0.8, 0.4, 0.1, 0.05, 0.025, 0.0125, 0.00625, 0.003125)
GRID_RANKS = (8, 16, 32)
DEFAULT_N_GRID = (3, 6, 12, 24, 48, 96, 192, 384)
DEFAULT_DURATION_S = 600.0
# medium request profile: mean/std of prompt and output lengths
DEFAULT_LENGTHS = LengthSpec.mean(250.0, 180.0, 231.0, 170.0)

STATS = ("max", "min", "mean", "std")
CHARACTERISTICS = ("rate", "rank", "input_len", "output_len")
FEATURE_NAMES = tuple(f"{c}_{s}" for c in CHARACTERISTICS for s in STATS)
TARGET_NAMES = ("max_throughput", "n_star", "g_star")
CSV_COLUMNS = FEATURE_NAMES + TARGET_NAMES + (
    "condition_hash", "duration_s", "seed", "all_starved", "frontier_open", "rates", "ranks")


@dataclass(frozen=True)
class Condition:
    """Adapter template mix: template i is (ranks[i], rates[i])."""

    rates: tuple[float, ...]
    ranks: tuple[int, ...]
    lengths: LengthSpec = DEFAULT_LENGTHS
    template_lengths: tuple[LengthSpec, ...] | None = None

    def __post_init__(self):
        if not self.rates:
            raise ValidationError("condition.rates", "must be non-empty")
        if len(self.rates) != len(self.ranks):
            raise ValidationError("condition", "rates and ranks must have the same length")
        if self.template_lengths is not None and len(self.template_lengths) != len(self.rates):
            raise ValidationError("condition.template_lengths", "one entry per template")
        for r in self.rates:
            if not r > 0:
                raise ValidationError("condition.rates", "rates must be positive")

    @property
    def templates(self) -> list[tuple[int, float]]:
        return list(zip(self.ranks, self.rates))

    def workload(self, n_adapters: int, duration: float, seed: int) -> WorkloadSpec:
        k = len(self.rates)
        adapters = tuple(
            AdapterSpec(i, int(self.ranks[i % k]), float(self.rates[i % k]),
                        self.template_lengths[i % k] if self.template_lengths else None)
            for i in range(n_adapters)
        )
        return WorkloadSpec(adapters, self.lengths, duration, seed)

    def canonical(self) -> dict:
        doc = {"rates": [float(r) for r in self.rates], "ranks": [int(r) for r in self.ranks],
               "lengths": list(self.lengths.moments())}
        if self.template_lengths:
            doc["template_lengths"] = [list(ls.moments()) for ls in self.template_lengths]
        return doc

    def hash(self, duration: float, seed: int) -> str:
        doc = dict(self.canonical(), duration_s=float(duration), seed=int(seed))
        return hashlib.sha1(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class WorkloadFeatures:
    values: tuple[float, ...]
    names: tuple[str, ...] = FEATURE_NAMES

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values))

    def vector(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def _stats(x: Sequence[float]) -> list[float]:
    a = np.asarray(x, dtype=np.float64)
    return [float(a.max()), float(a.min()), float(a.mean()), float(a.std())]


def _length_stats(means: Sequence[float], stds: Sequence[float]) -> list[float]:
    """max/min/mean over per-template means; std pooled over the mixture."""
    m = np.asarray(means, dtype=np.float64)
    s = np.asarray(stds, dtype=np.float64)
    mean = float(m.mean())
    pooled = math.sqrt(float(np.mean(s ** 2 + (m - mean) ** 2)))
    return [float(m.max()), float(m.min()), mean, pooled]


def encode_workload(condition) -> WorkloadFeatures:
    """16 statistics of rate, rank, input length and output length.

    Accepts a Condition or a WorkloadSpec.  Length statistics use the length
    spec's moments; a single shared spec gives max = min = mean.
    """
    if isinstance(condition, WorkloadSpec):
        if not condition.adapters:
            raise ValidationError("adapters", "must be non-empty")
        rates = [a.rate for a in condition.adapters]
        ranks = [a.rank for a in condition.adapters]
        moments = [condition.lengths_for(a).moments() for a in condition.adapters]
    else:
        rates = list(condition.rates)
        ranks = list(condition.ranks)
        if condition.template_lengths:
            moments = [ls.moments() for ls in condition.template_lengths]
        else:
            moments = [condition.lengths.moments()]
    values = _stats(rates) + _stats(ranks)
    values += _length_stats([m[0] for m in moments], [m[1] for m in moments])
    values += _length_stats([m[2] for m in moments], [m[3] for m in moments])
    return WorkloadFeatures(tuple(values))


# --------------------------------------------------------------------------
# sweep


@dataclass(frozen=True)
class FrontierPoint:
    n: int
    g: int
    throughput_tok_s: float | None
    starved: bool | None
    skipped: bool = False
    infeasible: bool = False

    def to_json(self) -> dict:
        return {"n": self.n, "g": self.g, "throughput_tok_s": self.throughput_tok_s,
                "starved": self.starved, "skipped": self.skipped, "infeasible": self.infeasible}


@dataclass
class PlacementResult:
    max_throughput_tok_s: float
    n_star: int
    g_star: int
    frontier: list[FrontierPoint] = field(default_factory=list)
    all_starved: bool = False
    frontier_open: bool = False
    duration_s: float = DEFAULT_DURATION_S
    seed: int = 0
    g_equals_n: dict | None = None  # best point under the G = N convention

    def to_json(self) -> dict:
        return {
            "max_throughput_tok_s": self.max_throughput_tok_s,
            "n_star": self.n_star,
            "g_star": self.g_star,
            "all_starved": self.all_starved,
            "frontier_open": self.frontier_open,
            "duration_s": self.duration_s,
            "seed": self.seed,
            "g_equals_n": self.g_equals_n,
            "frontier": [p.to_json() for p in self.frontier],
        }


def default_g_grid(n: int) -> list[int]:
    """{N, N/2, N/4, 8} clamped to [1, N]."""
    return sorted({min(max(g, 1), n) for g in (n, n // 2, n // 4, 8)}, reverse=True)


def full_g_grid(n: int) -> list[int]:
    return list(range(n, 0, -1))


def sweep_config(config: ServerConfig) -> ServerConfig:
    """Sweeps only need the arrival window, not the drain tail."""
    return replace(config, drain=False)


def evaluate_point(condition: Condition, config: ServerConfig, n: int, g: int, duration: float,
                   seed: int, backend: str | None = None) -> FrontierPoint:
    wl = condition.workload(n, duration, seed)
    try:
        res = run_simulation(wl, config.with_slots(g), backend=backend, record_tokens=False)
    except ConfigError:
        return FrontierPoint(n, g, None, True, infeasible=True)
    m = compute_metrics(res, wl)
    return FrontierPoint(n, g, m.throughput_tok_s, m.starved)


def sweep_optimal(condition: Condition, config: ServerConfig, n_values: Sequence[int] = DEFAULT_N_GRID,
                  g_values=None, duration: float = DEFAULT_DURATION_S, seed: int = 0, *,
                  early_exit: int | None = 3, drain: bool = False,
                  backend: str | None = None, jobs: int = 1) -> PlacementResult:
    """Best non-starved (N, G) over the grid.

    ``g_values`` is a list applied to every N, a callable N -> list, or None
    for the default geometric grid.  With ``early_exit=K`` the sweep stops
    after K consecutive N values without a non-starved improvement; the
    remaining points are recorded as skipped.  ``jobs`` > 1 evaluates the G
    values of one N in parallel, which leaves the result unchanged.
    """
    n_values = list(n_values)
    if not n_values:
        raise ValidationError("grid.n", "must be non-empty")
    if any(b <= a for a, b in zip(n_values, n_values[1:])) or n_values[0] < 1:
        raise ValidationError("grid.n", "N values must be positive and ascending")
    if g_values is None:
        g_of = default_g_grid
    elif callable(g_values):
        g_of = g_values
    else:
        fixed = list(g_values)
        g_of = lambda n: sorted({min(max(int(g), 1), n) for g in fixed}, reverse=True)  # noqa: E731
    cfg = config if drain else sweep_config(config)

    frontier: list[FrontierPoint] = []
    best: FrontierPoint | None = None
    stale = 0
    stopped_at = None
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for idx, n in enumerate(n_values):
            args = [(condition, cfg, n, g, duration, seed, backend) for g in g_of(n)]
            if pool is not None:
                points = list(pool.map(evaluate_point, *zip(*args)))
            else:
                points = [evaluate_point(*a) for a in args]
            improved = False
            for p in points:
                frontier.append(p)
                if p.starved is False and (best is None or p.throughput_tok_s > best.throughput_tok_s):
                    best = p
                    improved = True
            stale = 0 if improved else stale + 1
            if early_exit and stale >= early_exit and idx + 1 < len(n_values):
                stopped_at = idx + 1
                break
    finally:
        if pool is not None:
            pool.shutdown()
    if stopped_at is not None:
        for n in n_values[stopped_at:]:
            frontier.extend(FrontierPoint(n, g, None, None, skipped=True) for g in g_of(n))

    evaluated = [p for p in frontier if not p.skipped]
    g_eq = [p for p in evaluated if p.g == p.n and p.starved is False]
    g_eq_best = max(g_eq, key=lambda p: p.throughput_tok_s, default=None)
    g_equals_n = {"n_star": g_eq_best.n, "max_throughput_tok_s": g_eq_best.throughput_tok_s} if g_eq_best else None

    if best is None:
        n0 = n_values[0]
        first = [p for p in evaluated if p.n == n0 and p.throughput_tok_s is not None]
        top = max(first, key=lambda p: p.throughput_tok_s, default=None)
        return PlacementResult(top.throughput_tok_s if top else 0.0, n0, top.g if top else g_of(n0)[0],
                               frontier, all_starved=True, duration_s=duration, seed=seed,
                               g_equals_n=g_equals_n)
    return PlacementResult(best.throughput_tok_s, best.n, best.g, frontier,
                           frontier_open=(best.n == n_values[-1]), duration_s=duration, seed=seed,
                           g_equals_n=g_equals_n)


# --------------------------------------------------------------------------
# dataset


def condition_grid(rates: Sequence[float] = GRID_RATES, ranks: Sequence[int] = GRID_RANKS,
                   size: int = 3, rate_repetition: bool = False, rank_repetition: bool = True,
                   lengths: LengthSpec = DEFAULT_LENGTHS) -> list[Condition]:
    """All rate multisets x rank multisets of ``size`` templates.

    Rates are paired with ranks in a fixed order (highest rate with the
    smallest rank), which the per-characteristic features cannot tell apart.
    """
    rate_sets = (itertools.combinations_with_replacement if rate_repetition else itertools.combinations)(
        sorted(rates, reverse=True), size)
    rank_sets = list((itertools.combinations_with_replacement if rank_repetition else itertools.combinations)(
        sorted(ranks), size))
    return [Condition(tuple(rs), tuple(ks), lengths) for rs in rate_sets for ks in rank_sets]


def is_test(condition_hash: str, test_fraction: float) -> bool:
    return int(condition_hash[:8], 16) % 10_000 < round(test_fraction * 10_000)


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def dataset_row(condition: Condition, result: PlacementResult, duration: float, seed: int) -> dict:
    row = dict(encode_workload(condition).as_dict())
    row.update(max_throughput=result.max_throughput_tok_s, n_star=result.n_star, g_star=result.g_star,
               condition_hash=condition.hash(duration, seed), duration_s=float(duration), seed=int(seed),
               all_starved=result.all_starved, frontier_open=result.frontier_open,
               rates=" ".join(repr(float(r)) for r in condition.rates),
               ranks=" ".join(str(int(r)) for r in condition.ranks))
    return row


def _job(args):
    condition, config, n_values, g_values, duration, seed, early_exit, backend = args
    res = sweep_optimal(condition, config, n_values, g_values, duration, seed,
                        early_exit=early_exit, backend=backend)
    return dataset_row(condition, res, duration, seed)


@dataclass
class DatasetReport:
    conditions: int
    skipped_existing: int
    written: int
    failed: list = field(default_factory=list)
    path: str = ""


def read_dataset(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def dataset_arrays(rows: Sequence[dict]) -> tuple[np.ndarray, dict[str, np.ndarray], list[str]]:
    x = np.asarray([[float(r[n]) for n in FEATURE_NAMES] for r in rows], dtype=np.float64)
    y = {t: np.asarray([float(r[t]) for r in rows], dtype=np.float64) for t in TARGET_NAMES}
    return x, y, [r["condition_hash"] for r in rows]


def _write_sorted(path: Path):
    rows = read_dataset(path)
    rows.sort(key=lambda r: r["condition_hash"])
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in CSV_COLUMNS])
    os.replace(tmp, path)


def generate_dataset(conditions: Iterable[Condition], config: ServerConfig, out, *,
                     n_values: Sequence[int] = DEFAULT_N_GRID, g_values=None,
                     duration: float = DEFAULT_DURATION_S, seed: int = 0, early_exit: int | None = 3,
                     jobs: int = 1, backend: str | None = None, progress=None) -> DatasetReport:
    """Append one row per condition to the CSV at ``out``.

    Conditions already present (by condition hash) are skipped, so an
    interrupted run resumes where it stopped.  The finished file is sorted by
    condition hash, which makes it independent of ``jobs``.
    """
    conditions = list(conditions)
    path = Path(out)
    report = DatasetReport(len(conditions), 0, 0, path=str(path))
    if not conditions:
        log.warning("empty condition grid: nothing to generate")
    done = set()
    if path.exists() and path.stat().st_size > 0:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise ValidationError(str(path), "existing dataset has different columns")
            done = {r["condition_hash"] for r in reader}
    todo = []
    for c in conditions:
        if c.hash(duration, seed) in done:
            report.skipped_existing += 1
        else:
            todo.append(c)
            done.add(c.hash(duration, seed))

    new_file = not path.exists() or path.stat().st_size == 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new_file:
            w.writerow(CSV_COLUMNS)
            fh.flush()

        def write(row):
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
            fh.flush()
            report.written += 1
            if progress:
                progress(report.written, len(todo))

        args = [(c, config, tuple(n_values), g_values, duration, seed, early_exit, backend) for c in todo]
        if jobs <= 1:
            for a in args:
                try:
                    write(_job(a))
                except Exception as exc:  # noqa: BLE001 - reported per row
                    log.error("condition %s failed: %s", a[0].canonical(), exc)
                    report.failed.append((a[0].canonical(), str(exc)))
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {pool.submit(_job, a): a[0] for a in args}
                for fut in as_completed(futures):
                    try:
                        write(fut.result())
                    except Exception as exc:  # noqa: BLE001
                        log.error("condition %s failed: %s", futures[fut].canonical(), exc)
                        report.failed.append((futures[fut].canonical(), str(exc)))
    _write_sorted(path)
    return report


def split_rows(rows: Sequence[dict], test_fraction: float) -> tuple[list[dict], list[dict]]:
    train, test = [], []
    for r in rows:
        (test if is_test(r["condition_hash"], test_fraction) else train).append(r)
    return train, test
