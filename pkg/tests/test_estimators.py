import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from loratwin.errors import ConfigError, FittingError
from loratwin.estimators import (
    H100_SYNTHETIC, LatencyCoefficients, LoadLatencyTable, LoadSource, MemoryModel, fit_estimators,
    fit_linear, lat_adapters, lat_load, lat_model, lat_sched, lat_step, mem_max, step_latency,
)


def test_mem_max_examples():
    mm = MemoryModel(100_000, 0.0, {8: 500})
    assert mem_max(mm, 0, []) == 100_000
    assert mem_max(mm, 10, [8] * 10) == 95_000
    assert mem_max(MemoryModel(1000, 0.0, {8: 500}), 3, [8] * 3) == 0


def test_mem_max_monotone():
    mm = MemoryModel(100_000, base_cost=120.0)
    caps = [mem_max(mm, g, [16] * g) for g in range(0, 50)]
    assert all(b <= a for a, b in zip(caps, caps[1:]))
    assert mem_max(mm, 2, [8, 32]) <= mem_max(mm, 2, [8, 16])


def test_memory_model_validation():
    with pytest.raises(ConfigError):
        MemoryModel(100, 0.0, {8: 500, 16: 400})
    with pytest.raises(ConfigError):
        MemoryModel(0, base_cost=1.0)


def test_lat_sched_examples():
    c = LatencyCoefficients(k1=1e-4, k2=2e-4, k3=1e-4, k5=0.02, k7=1.0)
    assert lat_sched(c, 0, 0, 4, 8) == 0.0
    assert lat_sched(c, 10, 5, 4, 8) == pytest.approx(2.25e-3, rel=1e-12)
    with pytest.raises(ValueError):
        lat_sched(c, 1, 1, 0, 8)
    with pytest.raises(ValueError):
        lat_sched(c, 1, 1, 4, 0)


def test_lat_sched_clamps_and_caps_ratio():
    c = LatencyCoefficients(k1=0.0, k2=1e-6, k3=-1e-3, k5=0.02, k7=1.0)
    assert lat_sched(c, 0, 10, 4, 4) == 0.0
    c2 = LatencyCoefficients(k3=1e-3, k5=0.02, k7=1.0)
    assert lat_sched(c2, 0, 10, 16, 4) == lat_sched(c2, 0, 10, 4, 4)


def test_lat_model_and_adapters():
    assert lat_model(LatencyCoefficients(k4=0, k5=0.02), 55) == 0.02
    assert lat_model(LatencyCoefficients(k4=1e-4, k5=0.02), 100) == pytest.approx(0.03)
    c = LatencyCoefficients(k5=0.02, k6=0.005, k7=1.10)
    assert lat_adapters(c, 0) == 1.0
    assert lat_adapters(c, 1) == pytest.approx(1.105)
    assert lat_adapters(c, 20) == pytest.approx(1.20)


def test_lat_load_examples():
    t = LoadLatencyTable({8: 0.05}, 1.7)
    assert lat_load(t, []) == 0
    assert lat_load(t, [(8, LoadSource.CPU)]) == 0.05
    assert lat_load(t, [(8, LoadSource.DISK)]) == pytest.approx(0.085)
    with pytest.raises(ConfigError):
        lat_load(t, [(64, LoadSource.CPU)])


def test_lat_step_examples():
    only_k5 = LatencyCoefficients(k5=0.02)
    t = LoadLatencyTable({8: 0.05}, 1.7)
    assert lat_step(only_k5, t, 3, 0, 1, 1, 0, []) == 0.02
    c = LatencyCoefficients(k1=1e-4, k2=2e-4, k3=1e-4, k4=1e-4, k5=0.02, k6=0.005, k7=1.10)
    got = lat_step(c, t, 10, 5, 4, 8, 1, [(8, LoadSource.CPU)])
    # the scheduler term uses R_run=10, the model term R_run=100 in the worked example, so rebuild it
    expected = lat_sched(c, 10, 5, 4, 8) + 0.05 + lat_model(c, 10) * lat_adapters(c, 1)
    assert got == pytest.approx(expected, rel=1e-12)
    assert 2.25e-3 + 0.05 + 0.03 * 1.105 == pytest.approx(0.08540, abs=1e-12)
    double = LatencyCoefficients(k5=0.04)
    assert lat_step(double, t, 7, 0, 1, 1, 0, []) == 2 * lat_step(only_k5, t, 7, 0, 1, 1, 0, [])


def test_step_latency_matches_lat_step():
    c = H100_SYNTHETIC.coefficients
    t = H100_SYNTHETIC.load
    for rr, rw, g, n, a in [(1, 0, 1, 1, 1), (50, 30, 4, 16, 4), (200, 0, 32, 32, 32), (3, 900, 1, 3, 1)]:
        loads = [(16, LoadSource.CPU)]
        assert step_latency(c, rr, rw, min(g / n, 1.0), a, t.seconds(16)) == lat_step(c, t, rr, rw, g, n, a, loads)


@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 64), st.integers(0, 4))
def test_lat_step_monotone(rr, rw, a, nloads):
    c = LatencyCoefficients(k1=1e-5, k2=5e-6, k3=4e-6, k4=1e-4, k5=0.02, k6=0.002, k7=1.2)
    t = LoadLatencyTable({8: 0.05})
    base = lat_step(c, t, rr, rw, 4, 8, a, [(8, LoadSource.CPU)] * nloads)
    assert lat_step(c, t, rr + 1, rw, 4, 8, a, [(8, LoadSource.CPU)] * nloads) >= base
    assert lat_step(c, t, rr, rw + 1, 4, 8, a, [(8, LoadSource.CPU)] * nloads) >= base
    assert lat_step(c, t, rr, rw, 4, 8, a + 1, [(8, LoadSource.CPU)] * nloads) >= base
    assert lat_step(c, t, rr, rw, 4, 8, a, [(8, LoadSource.CPU)] * (nloads + 1)) >= base


def test_coefficient_checks():
    with pytest.raises(ConfigError):
        LatencyCoefficients(k5=0.0).check()
    with pytest.raises(ConfigError):
        LatencyCoefficients(k5=0.02, k7=0.9).check()


def test_fit_linear_noiseless():
    samples = [([float(r), 1.0], 1e-4 * r + 0.02) for r in range(1, 51)]
    k4, k5 = fit_linear(samples)
    assert abs(k4 - 1e-4) / 1e-4 < 1e-9
    assert abs(k5 - 0.02) / 0.02 < 1e-9


def test_fit_linear_noisy():
    rng = np.random.default_rng(0)
    samples = [([float(r), 1.0], 1e-4 * r + 0.02 + rng.normal(0, 1e-5)) for r in range(1, 51)]
    k4, k5 = fit_linear(samples)
    assert abs(k4 - 1e-4) / 1e-4 < 0.05
    assert abs(k5 - 0.02) / 0.02 < 0.05


def test_fit_linear_two_points():
    k4, k5 = fit_linear([([0.0, 1.0], 0.02), ([100.0, 1.0], 0.03)])
    assert k4 == pytest.approx(1e-4, rel=1e-9)
    assert k5 == pytest.approx(0.02, rel=1e-9)


def test_fit_linear_singular_names_features():
    with pytest.raises(FittingError, match="r_running"):
        fit_linear([([5.0, 1.0], 0.1), ([5.0, 1.0], 0.1)], ["r_running", "intercept"])


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def test_fit_estimators_round_trip(tmp_path):
    true = LatencyCoefficients(k1=2e-5, k2=7e-6, k3=-3e-6, k4=1.5e-4, k5=0.025, k6=0.004, k7=1.15)
    rng = np.random.default_rng(1)
    sched_rows, model_rows, adapter_rows = [], [], []
    for _ in range(60):
        rr, rw, g, n, a = (int(rng.integers(1, 300)), int(rng.integers(0, 300)), int(rng.integers(1, 32)),
                           int(rng.integers(1, 64)), int(rng.integers(1, 16)))
        sched_rows.append([rr, rw, g, n, true.k1 * rr + true.k2 * rw + true.k3 * rw * min(g / n, 1.0)])
        model_rows.append([rr, true.k4 * rr + true.k5])
        adapter_rows.append([a, rr, (true.k4 * rr + true.k5) * (true.k6 * a + true.k7)])
    load_rows = [[8, "cpu", 0.04], [16, "cpu", 0.06], [8, "disk", 0.068], [16, "disk", 0.102]]
    mem_rows = [[g, r, 200_000 - g * {8: 100, 16: 200}[r]] for g in (1, 4, 8) for r in (8, 16)]
    rep = fit_estimators(
        H100_SYNTHETIC,
        sched=_write(tmp_path / "s.csv", ["r_running", "r_waiting", "g", "n", "observed_s"], sched_rows),
        model=_write(tmp_path / "m.csv", ["r_running", "observed_s"], model_rows),
        adapters=_write(tmp_path / "a.csv", ["a_running", "r_running", "observed_s"], adapter_rows),
        load=_write(tmp_path / "l.csv", ["rank", "source", "observed_s"], load_rows),
        memory=_write(tmp_path / "mem.csv", ["slots", "rank", "kv_capacity_tokens"], mem_rows),
    )
    got = rep.estimators.coefficients
    for name in ("k1", "k2", "k3", "k4", "k5", "k6", "k7"):
        assert getattr(got, name) == pytest.approx(getattr(true, name), rel=1e-9), name
    assert rep.estimators.load.cpu_load_seconds == {8: 0.04, 16: 0.06}
    assert rep.estimators.load.disk_multiplier == pytest.approx(1.7)
    assert rep.estimators.memory.total_kv_budget == 200_000
    assert rep.estimators.memory.slot_costs == {8: 100, 16: 200}


def test_fit_estimators_missing_columns(tmp_path):
    with pytest.raises(FittingError, match="missing columns"):
        fit_estimators(model=_write(tmp_path / "m.csv", ["r", "observed_s"], [[1, 0.1]]))
