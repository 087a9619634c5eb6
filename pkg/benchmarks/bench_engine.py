"""Wall-time comparison of the native and pure-Python engine backends.

    python3 benchmarks/bench_engine.py [--duration 600] [--repeat 3]

Each scenario is run on both backends; results are checked for equality and
the best-of-N wall time is reported.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from loratwin.config import preset_config
from loratwin.engine import native_available, run_simulation
from loratwin.placement import Condition

SCENARIOS = [
    # (label, per-template rates, ranks, adapters, slots)
    ("3 adapters, G=1, 0.1 req/s", (0.1, 0.1, 0.1), (8, 16, 32), 3, 1),
    ("12 adapters, G=12", (0.2, 0.1, 0.05), (8, 16, 32), 12, 12),
    ("64 adapters, G=8", (1 / 64,), (16,), 64, 8),
    ("64 adapters, G=64, 1 req/s", (1 / 64,), (8, 16, 32), 64, 64),
    ("96 adapters, G=24", (0.4, 0.1, 0.05), (8, 16, 32), 96, 24),
]


def best_time(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if not native_available():
        raise SystemExit("native core not built; install with `pip install -e . --no-build-isolation`")

    print(f"{'scenario':32s} {'requests':>8s} {'iters':>8s} {'python s':>9s} {'native s':>9s} {'speedup':>8s}")
    for label, rates, ranks, n, g in SCENARIOS:
        k = max(len(rates), len(ranks))
        cond = Condition(tuple(rates[i % len(rates)] for i in range(k)), tuple(ranks[i % len(ranks)] for i in range(k)))
        wl = cond.workload(n, args.duration, args.seed)
        cfg = preset_config(g)
        t_py, r_py = best_time(lambda: run_simulation(wl, cfg, backend="python", record_tokens=False), args.repeat)
        t_nat, r_nat = best_time(lambda: run_simulation(wl, cfg, backend="native", record_tokens=False), args.repeat)
        same = (np.array_equal(r_py.completion_time, r_nat.completion_time, equal_nan=True)
                and r_py.iterations == r_nat.iterations and r_py.window_tokens == r_nat.window_tokens)
        if not same:
            raise SystemExit(f"{label}: backends disagree")
        print(f"{label:32s} {r_py.n_requests:8d} {r_py.iterations:8d} {t_py:9.3f} {t_nat:9.3f} {t_py / t_nat:7.1f}x")


if __name__ == "__main__":
    main()
