"""Analytic estimators for KV capacity and per-iteration latency.

One iteration of the serving loop costs::

    step = sched + load + model * adapters
    sched = k1*R_running + k2*R_waiting + k3*R_waiting*(G/N)
    model = k4*R_running + k5
    adapters = k6*A_running + k7          (1.0 when no adapter is in the batch)

plus a KV-capacity estimate that shrinks linearly with every adapter slot.
The coefficients are fitted by ordinary least squares from benchmark CSVs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, FittingError


class LoadSource(str, Enum):
    CPU = "cpu"
    DISK = "disk"


@dataclass(frozen=True)
class LatencyCoefficients:
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    k5: float = 0.0
    k6: float = 0.0
    k7: float = 1.0

    def check(self):
        """Engine-side sanity check; raises ConfigError."""
        if self.k4 < 0:
            raise ConfigError("estimators.coefficients.k4 must be >= 0")
        if not self.k5 > 0:
            raise ConfigError("estimators.coefficients.k5 must be > 0")
        if self.k6 < 0:
            raise ConfigError("estimators.coefficients.k6 must be >= 0")
        if self.k7 < 1:
            raise ConfigError("estimators.coefficients.k7 must be >= 1")

    def to_json(self) -> dict:
        return {f"k{i}": getattr(self, f"k{i}") for i in range(1, 8)}

    @classmethod
    def from_json(cls, doc: Mapping) -> "LatencyCoefficients":
        return cls(**{k: float(v) for k, v in doc.items()})


@dataclass(frozen=True)
class MemoryModel:
    total_kv_budget: int
    kv_bytes_per_token: float = 0.0
    slot_costs: Mapping[int, int] | None = None
    base_cost: float | None = None  # per slot of rank 8; cost scales with rank / 8

    def __post_init__(self):
        if self.total_kv_budget <= 0:
            raise ConfigError("estimators.memory.total_kv_budget must be > 0")
        if self.slot_costs:
            costs = {int(r): int(c) for r, c in self.slot_costs.items()}
            ranks = sorted(costs)
            if any(costs[a] >= costs[b] for a, b in zip(ranks, ranks[1:])):
                raise ConfigError("estimators.memory.slot_cost_tokens must increase strictly with rank")
            object.__setattr__(self, "slot_costs", costs)
        elif self.base_cost is None:
            raise ConfigError("estimators.memory needs slot_cost_tokens or slot_base_cost")

    def slot_cost_tokens(self, rank: int) -> int:
        if self.slot_costs and rank in self.slot_costs:
            return self.slot_costs[rank]
        if self.base_cost is None:
            raise ConfigError(f"no slot cost configured for rank {rank}")
        return int(round(self.base_cost * rank / 8))

    def to_json(self) -> dict:
        doc = {"total_kv_budget": self.total_kv_budget, "kv_bytes_per_token": self.kv_bytes_per_token}
        if self.slot_costs:
            doc["slot_cost_tokens"] = {str(r): c for r, c in sorted(self.slot_costs.items())}
        if self.base_cost is not None:
            doc["slot_base_cost"] = self.base_cost
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "MemoryModel":
        costs = doc.get("slot_cost_tokens")
        return cls(
            int(doc["total_kv_budget"]),
            float(doc.get("kv_bytes_per_token", 0.0)),
            {int(r): int(c) for r, c in costs.items()} if costs else None,
            float(doc["slot_base_cost"]) if "slot_base_cost" in doc else None,
        )


@dataclass(frozen=True)
class LoadLatencyTable:
    cpu_load_seconds: Mapping[int, float]
    disk_multiplier: float = 1.7

    def __post_init__(self):
        table = {int(r): float(s) for r, s in self.cpu_load_seconds.items()}
        ranks = sorted(table)
        if any(table[a] > table[b] for a, b in zip(ranks, ranks[1:])):
            raise ConfigError("estimators.load.cpu_load_seconds must increase with rank")
        if self.disk_multiplier < 1:
            raise ConfigError("estimators.load.disk_multiplier must be >= 1")
        object.__setattr__(self, "cpu_load_seconds", table)

    def seconds(self, rank: int, source: LoadSource = LoadSource.CPU) -> float:
        try:
            base = self.cpu_load_seconds[rank]
        except KeyError:
            raise ConfigError(f"load table has no entry for rank {rank}") from None
        return base * (1.0 if LoadSource(source) is LoadSource.CPU else self.disk_multiplier)

    def to_json(self) -> dict:
        return {
            "cpu_load_seconds": {str(r): s for r, s in sorted(self.cpu_load_seconds.items())},
            "disk_multiplier": self.disk_multiplier,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "LoadLatencyTable":
        return cls({int(r): float(s) for r, s in doc["cpu_load_seconds"].items()},
                   float(doc.get("disk_multiplier", 1.7)))


@dataclass(frozen=True)
class Estimators:
    coefficients: LatencyCoefficients
    memory: MemoryModel
    load: LoadLatencyTable

    def to_json(self) -> dict:
        return {
            "coefficients": self.coefficients.to_json(),
            "memory": self.memory.to_json(),
            "load": self.load.to_json(),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Estimators":
        return cls(
            LatencyCoefficients.from_json(doc["coefficients"]),
            MemoryModel.from_json(doc["memory"]),
            LoadLatencyTable.from_json(doc["load"]),
        )


# Synthetic "H100-like" profile.  Not measured: the values are chosen so the
# twin shows the qualitative overheads (slot memory, adapter compute, loads,
# slot-bound scheduler time) for a ~8B model with ~128 KiB of KV per token.
H100_SYNTHETIC = Estimators(
    LatencyCoefficients(k1=1.0e-5, k2=5.0e-6, k3=-4.0e-6, k4=1.0e-4, k5=0.022, k6=0.002, k7=1.2),
    MemoryModel(total_kv_budget=250_000, kv_bytes_per_token=131072.0, base_cost=120.0),
    LoadLatencyTable({8: 0.045, 16: 0.065, 32: 0.105}, disk_multiplier=1.7),
)


def mem_max(mm: MemoryModel, slots: int, slot_rank_profile: Sequence[int]) -> int:
    """Tokens of KV capacity left after reserving ``slots`` adapter slots."""
    if len(slot_rank_profile) != slots:
        raise ValueError(f"slot_rank_profile has {len(slot_rank_profile)} entries for {slots} slots")
    used = sum(mm.slot_cost_tokens(int(r)) for r in slot_rank_profile)
    return max(0, mm.total_kv_budget - used)


def lat_sched(c: LatencyCoefficients, r_running: int, r_waiting: int, g: int, n: int) -> float:
    if n <= 0 or g <= 0:
        raise ValueError("lat_sched needs g >= 1 and n >= 1")
    ratio = g / n
    if ratio > 1.0:
        ratio = 1.0
    value = c.k1 * r_running + c.k2 * r_waiting + c.k3 * r_waiting * ratio
    return value if value > 0.0 else 0.0


def lat_model(c: LatencyCoefficients, r_running: int) -> float:
    return c.k4 * r_running + c.k5


def lat_adapters(c: LatencyCoefficients, a_running: int) -> float:
    # the 0 -> 1 adapter transition is a discontinuity, not part of the line
    if a_running == 0:
        return 1.0
    return c.k6 * a_running + c.k7


def lat_load(t: LoadLatencyTable, loads: Iterable[tuple[int, LoadSource]]) -> float:
    total = 0.0
    for rank, source in loads:
        total += t.seconds(rank, source)
    return total


def lat_step(c: LatencyCoefficients, t: LoadLatencyTable, r_running: int, r_waiting: int,
             g: int, n: int, a_running: int, loads=()) -> float:
    return (lat_sched(c, r_running, r_waiting, g, n) + lat_load(t, loads)
            + lat_model(c, r_running) * lat_adapters(c, a_running))


def step_latency(c: LatencyCoefficients, r_running: int, r_waiting: int, ratio: float,
                 a_running: int, load_s: float) -> float:
    """Engine fast path of :func:`lat_step` with a pre-clamped G/N ratio and
    pre-summed load seconds.  The native core repeats this arithmetic
    operation for operation."""
    sched = c.k1 * r_running + c.k2 * r_waiting + c.k3 * r_waiting * ratio
    if sched < 0.0:
        sched = 0.0
    model = c.k4 * r_running + c.k5
    adapters = 1.0 if a_running == 0 else c.k6 * a_running + c.k7
    return sched + load_s + model * adapters


# --------------------------------------------------------------------------
# fitting


def fit_linear(samples: Sequence[tuple[Sequence[float], float]],
               feature_names: Sequence[str] | None = None) -> np.ndarray:
    """Ordinary least squares over ``(features, observed)`` samples.

    Raises FittingError when the design matrix is rank deficient; the message
    lists the features involved in the collinearity.
    """
    if not samples:
        raise FittingError("no samples")
    X = np.asarray([list(f) for f, _ in samples], dtype=float)
    y = np.asarray([o for _, o in samples], dtype=float)
    if X.ndim != 2:
        raise FittingError("feature vectors must all have the same length")
    n, p = X.shape
    names = list(feature_names) if feature_names is not None else [f"x{i}" for i in range(p)]
    if len(names) != p:
        raise FittingError(f"{len(names)} feature names for {p} features")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise FittingError("non-finite values in samples")
    _, s, vt = np.linalg.svd(X, full_matrices=True)
    tol = (s[0] if len(s) else 0.0) * max(n, p) * np.finfo(float).eps * 16
    rank = int(np.sum(s > tol))
    if rank < p:
        null = vt[rank:]
        involved = [names[j] for j in range(p) if np.any(np.abs(null[:, j]) > 1e-8)]
        raise FittingError(
            f"design matrix is rank deficient (rank {rank} < {p}); collinear features: {', '.join(involved)}"
        )
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


def sched_features(r_running, r_waiting, g, n, intercept=False) -> list[float]:
    ratio = min(g / n, 1.0)
    feats = [float(r_running), float(r_waiting), float(r_waiting) * ratio]
    return feats + [1.0] if intercept else feats


@dataclass
class FitReport:
    estimators: Estimators
    fitted: dict = field(default_factory=dict)  # estimator name -> coefficients / table
    sched_intercept: float | None = None


def _read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _require(rows: list[dict], columns: Sequence[str], what: str):
    if not rows:
        raise FittingError(f"{what}: no rows")
    missing = [c for c in columns if c not in rows[0]]
    if missing:
        raise FittingError(f"{what}: missing columns {', '.join(missing)}")


def fit_estimators(base: Estimators = H100_SYNTHETIC, *, sched=None, model=None, adapters=None,
                   load=None, memory=None, sched_intercept: bool = False) -> FitReport:
    """Refit any subset of the estimators from benchmark CSV files.

    Expected columns (one measurement per row):

    * sched: ``r_running, r_waiting, g, n, observed_s``
    * model: ``r_running, observed_s``
    * adapters: ``a_running, r_running, observed_s`` (rows with a_running >= 1;
      the multiplier is ``observed_s / model(r_running)``)
    * load: ``rank, source, observed_s``
    * memory: ``slots, rank, kv_capacity_tokens``
    """
    c = base.coefficients
    report = FitReport(base)
    if model is not None:
        rows = _read_rows(model)
        _require(rows, ["r_running", "observed_s"], "model")
        k4, k5 = fit_linear([([float(r["r_running"]), 1.0], float(r["observed_s"])) for r in rows],
                            ["r_running", "intercept"])
        c = replace(c, k4=float(k4), k5=float(k5))
        report.fitted["model"] = {"k4": c.k4, "k5": c.k5}
    if adapters is not None:
        rows = [r for r in _read_rows(adapters) if int(r.get("a_running", 0) or 0) >= 1]
        _require(rows, ["a_running", "r_running", "observed_s"], "adapters")
        samples = [([float(r["a_running"]), 1.0],
                    float(r["observed_s"]) / lat_model(c, float(r["r_running"]))) for r in rows]
        k6, k7 = fit_linear(samples, ["a_running", "intercept"])
        c = replace(c, k6=float(k6), k7=float(k7))
        report.fitted["adapters"] = {"k6": c.k6, "k7": c.k7}
    if sched is not None:
        rows = _read_rows(sched)
        _require(rows, ["r_running", "r_waiting", "g", "n", "observed_s"], "sched")
        names = ["r_running", "r_waiting", "r_waiting_x_g_over_n"] + (["intercept"] if sched_intercept else [])
        coef = fit_linear(
            [(sched_features(float(r["r_running"]), float(r["r_waiting"]), float(r["g"]), float(r["n"]),
                             sched_intercept), float(r["observed_s"])) for r in rows],
            names,
        )
        c = replace(c, k1=float(coef[0]), k2=float(coef[1]), k3=float(coef[2]))
        report.fitted["sched"] = {"k1": c.k1, "k2": c.k2, "k3": c.k3}
        if sched_intercept:
            report.sched_intercept = float(coef[3])
            report.fitted["sched"]["intercept"] = report.sched_intercept
    load_table = base.load
    if load is not None:
        rows = _read_rows(load)
        _require(rows, ["rank", "source", "observed_s"], "load")
        by_rank: dict[tuple[int, str], list[float]] = {}
        for r in rows:
            by_rank.setdefault((int(r["rank"]), r["source"].strip().lower()), []).append(float(r["observed_s"]))
        cpu = {rank: float(np.mean(v)) for (rank, src), v in by_rank.items() if src == "cpu"}
        if not cpu:
            raise FittingError("load: no cpu rows")
        ratios = [float(np.mean(v)) / cpu[rank] for (rank, src), v in by_rank.items()
                  if src == "disk" and rank in cpu and cpu[rank] > 0]
        mult = float(np.mean(ratios)) if ratios else base.load.disk_multiplier
        load_table = LoadLatencyTable(cpu, mult)
        report.fitted["load"] = load_table.to_json()
    mem = base.memory
    if memory is not None:
        rows = _read_rows(memory)
        _require(rows, ["slots", "rank", "kv_capacity_tokens"], "memory")
        ranks = sorted({int(r["rank"]) for r in rows})
        names = ["budget"] + [f"slot_cost_rank{k}" for k in ranks]
        samples = []
        for r in rows:
            feats = [1.0] + [-float(r["slots"]) if int(r["rank"]) == k else 0.0 for k in ranks]
            samples.append((feats, float(r["kv_capacity_tokens"])))
        coef = fit_linear(samples, names)
        costs = {k: int(round(v)) for k, v in zip(ranks, coef[1:])}
        mem = MemoryModel(int(round(coef[0])), base.memory.kv_bytes_per_token, costs, base.memory.base_cost)
        report.fitted["memory"] = mem.to_json()
    report.estimators = Estimators(c, mem, load_table)
    return report


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), math.ulp(1.0))
