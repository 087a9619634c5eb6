"""Throughput, ITL, TTFT, starvation and SMAPE.

Percentiles use the nearest-rank method.  Inter-token latencies come from
the engine as (interval, count) groups, so percentiles are exact without
storing every token.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .workload import WorkloadSpec


@dataclass(frozen=True)
class MetricsSummary:
    throughput_tok_s: float
    itl_mean_s: float
    itl_p50_s: float
    itl_p99_s: float
    ttft_mean_s: float
    ttft_p50_s: float
    ttft_p99_s: float
    ideal_throughput_tok_s: float
    starved: bool
    finished_count: int
    rejected_count: int
    window_s: float
    window_tokens: int
    preemptions: int = 0
    truncated: bool = False
    degenerate: bool = False

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def nearest_rank(sorted_values: np.ndarray, p: float) -> float:
    n = len(sorted_values)
    if n == 0:
        return math.nan
    rank = max(1, math.ceil(p / 100.0 * n))
    return float(sorted_values[rank - 1])


def weighted_nearest_rank(values: np.ndarray, counts: np.ndarray, p: float) -> float:
    """Nearest-rank percentile of ``values`` each repeated ``counts`` times."""
    total = int(counts.sum()) if len(counts) else 0
    if total == 0:
        return math.nan
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(counts[order])
    rank = max(1, math.ceil(p / 100.0 * total))
    return float(values[order][np.searchsorted(cum, rank)])


def _itl_stats(values: np.ndarray, counts: np.ndarray) -> tuple[float, float, float]:
    total = int(counts.sum()) if len(counts) else 0
    if total == 0:
        return math.nan, math.nan, math.nan
    mean = float(np.dot(values, counts) / total)
    return mean, weighted_nearest_rank(values, counts, 50), weighted_nearest_rank(values, counts, 99)


def _dist_stats(x: np.ndarray) -> tuple[float, float, float]:
    if len(x) == 0:
        return math.nan, math.nan, math.nan
    s = np.sort(x)
    return float(x.mean()), nearest_rank(s, 50), nearest_rank(s, 99)


def ideal_throughput(workload: WorkloadSpec, includes_input: bool = False) -> float:
    """Token demand of the workload description: sum of rate x mean output length."""
    total = 0.0
    for a in workload.adapters:
        mi, _, mo, _ = workload.lengths_for(a).moments()
        total += a.rate * (mo + mi if includes_input else mo)
    return total


def starvation_verdict(throughput: float, ideal: float, threshold: float = 0.9) -> bool:
    return throughput < threshold * ideal


def compute_metrics(result, workload: WorkloadSpec | None = None, *, ideal_basis: str | None = None,
                    includes_input: bool | None = None, threshold: float | None = None) -> MetricsSummary:
    """Summarize a SimulationResult over its arrival window.

    The starvation ideal defaults to the offered load (tokens of the requests
    that actually arrived, rejected ones excluded); ``ideal_basis="nominal"``
    uses the workload description instead.
    """
    cfg = result.config.get("ideal", {}) if result.config else {}
    basis = ideal_basis or cfg.get("basis", "offered")
    with_input = cfg.get("includes_input", False) if includes_input is None else includes_input
    thr = cfg.get("starvation_threshold", 0.9) if threshold is None else threshold
    window = result.duration
    n = result.n_requests
    rejected = result.rejected_mask()
    finished = result.finished_mask()

    if n == 0 or window <= 0:
        return MetricsSummary(0.0, math.nan, math.nan, math.nan, math.nan, math.nan, math.nan,
                              0.0, False, 0, int(rejected.sum()), window, 0,
                              truncated=result.truncated, degenerate=True)

    throughput = result.window_tokens / window
    itl_mean, itl_p50, itl_p99 = _itl_stats(result.itl_values, result.itl_counts)
    has_first = ~np.isnan(result.first_token_time)
    ttft = result.first_token_time[has_first] - result.arrival[has_first]
    ttft_mean, ttft_p50, ttft_p99 = _dist_stats(ttft)

    if basis == "nominal":
        if workload is None:
            raise ValidationError("workload", "nominal ideal throughput needs the workload spec")
        ideal = ideal_throughput(workload, with_input)
    else:
        ok = ~rejected
        offered = int(result.output_tokens[ok].sum())
        if with_input:
            offered += int(result.input_tokens[ok].sum())
        ideal = offered / window

    return MetricsSummary(
        throughput_tok_s=throughput,
        itl_mean_s=itl_mean, itl_p50_s=itl_p50, itl_p99_s=itl_p99,
        ttft_mean_s=ttft_mean, ttft_p50_s=ttft_p50, ttft_p99_s=ttft_p99,
        ideal_throughput_tok_s=ideal,
        starved=starvation_verdict(throughput, ideal, thr),
        finished_count=int(finished.sum()),
        rejected_count=int(rejected.sum()),
        window_s=window,
        window_tokens=int(result.window_tokens),
        preemptions=int(result.preemption_count.sum()),
        truncated=bool(result.truncated),
    )


def smape(predicted: Sequence[float], actual: Sequence[float]) -> float:
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or p.ndim != 1:
        raise ValidationError("series", f"length mismatch: {p.shape} vs {a.shape}")
    if len(p) == 0:
        raise ValidationError("series", "empty series")
    total = np.abs(p) + np.abs(a)
    num = np.abs(p - a)
    # 200 * (num / total) rather than 100 * num / (total / 2): the ratio never rounds above 1
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(total == 0, 0.0, 200.0 * (num / np.where(total == 0, 1.0, total)))
    return float(terms.mean())


# --------------------------------------------------------------------------
# real traces


@dataclass(frozen=True)
class TraceMetrics:
    throughput_tok_s: float
    itl_mean_s: float
    ttft_mean_s: float
    requests: int


COMPARED = ("throughput_tok_s", "itl_mean_s", "ttft_mean_s")


def trace_metrics(records: Sequence[Mapping], window_s: float | None = None) -> TraceMetrics:
    """Metrics of a per-request trace ``{adapter_id, arrival_s, first_token_s, token_times_s}``.

    Without an explicit window, the window ends at the last emitted token.
    """
    ttfts, itl_sum, itl_n, times = [], 0.0, 0, []
    for i, rec in enumerate(records):
        for key in ("adapter_id", "arrival_s", "token_times_s"):
            if key not in rec:
                raise ValidationError(f"$[{i}].{key}", "missing field")
        tt = [float(t) for t in rec["token_times_s"]]
        first = rec.get("first_token_s", tt[0] if tt else None)
        if first is not None:
            ttfts.append(float(first) - float(rec["arrival_s"]))
        for x, y in zip(tt, tt[1:]):
            itl_sum += y - x
            itl_n += 1
        times.extend(tt)
    if window_s is None:
        window_s = max(times) if times else 0.0
    tokens = sum(1 for t in times if t <= window_s)
    return TraceMetrics(
        throughput_tok_s=tokens / window_s if window_s > 0 else 0.0,
        itl_mean_s=itl_sum / itl_n if itl_n else math.nan,
        ttft_mean_s=float(np.mean(ttfts)) if ttfts else math.nan,
        requests=len(records),
    )


def load_real_trace(path) -> dict[str, TraceMetrics]:
    """Scenario -> metrics.  Accepts a bare record array (one scenario named
    "default"), ``{"duration_s", "requests"}``, or a mapping of scenario names
    to either of those."""
    with Path(path).open() as fh:
        doc = json.load(fh)
    if isinstance(doc, list) or "requests" in doc:
        doc = {"default": doc}
    out = {}
    for name, body in doc.items():
        if isinstance(body, list):
            out[name] = trace_metrics(body)
        else:
            out[name] = trace_metrics(body["requests"], body.get("duration_s"))
    return out


def load_dt_metrics(path) -> dict[str, dict]:
    """Scenario -> metrics dict from a simulate output, or a mapping of them."""
    with Path(path).open() as fh:
        doc = json.load(fh)
    if "metrics" in doc and isinstance(doc.get("metrics"), dict):
        return {"default": doc["metrics"]}
    out = {}
    for name, body in doc.items():
        out[name] = body["metrics"] if isinstance(body, dict) and "metrics" in body else body
    return out


def _value(m, key):
    v = m.get(key) if isinstance(m, Mapping) else getattr(m, key)
    return math.nan if v is None else float(v)


def compare_traces(dt: Mapping[str, object], real: Mapping[str, object]) -> dict:
    """SMAPE of each compared metric across the scenarios both sides share."""
    only_dt = sorted(set(dt) - set(real))
    only_real = sorted(set(real) - set(dt))
    if only_dt or only_real:
        raise ValidationError("scenarios", f"unmatched scenarios: dt-only {only_dt}, real-only {only_real}")
    keys = sorted(dt)
    report = {"scenarios": keys, "smape_pct": {}, "values": {}}
    for metric in COMPARED:
        p = [_value(dt[k], metric) for k in keys]
        a = [_value(real[k], metric) for k in keys]
        pairs = [(x, y) for x, y in zip(p, a) if not (math.isnan(x) or math.isnan(y))]
        report["smape_pct"][metric] = smape([x for x, _ in pairs], [y for _, y in pairs]) if pairs else None
        report["values"][metric] = {k: {"dt": x, "real": y} for k, x, y in zip(keys, p, a)}
    return report


def format_report(report: dict) -> str:
    labels = {"throughput_tok_s": "Throughput", "itl_mean_s": "ITL", "ttft_mean_s": "TTFT"}
    rows = [("Metric", "SMAPE (%)", "Scenarios")]
    for metric in COMPARED:
        v = report["smape_pct"][metric]
        rows.append((labels[metric], "n/a" if v is None else f"{v:.2f}", str(len(report["scenarios"]))))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


__all__ = [
    "MetricsSummary", "compute_metrics", "ideal_throughput", "starvation_verdict", "smape",
    "nearest_rank", "weighted_nearest_rank", "TraceMetrics", "trace_metrics", "load_real_trace",
    "load_dt_metrics", "compare_traces", "format_report"
]
