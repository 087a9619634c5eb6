import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import BACKENDS, make_config
from loratwin.config import preset_config
from loratwin.engine import STATUS_NAMES, native_available, run_simulation, simulate_requests
from loratwin.errors import ConfigError, SimulationError
from loratwin.metrics import compute_metrics
from loratwin.workload import AdapterSpec, LengthSpec, Request, RequestArrays, WorkloadSpec

FIXTURES = Path(__file__).parent / "fixtures"


def one_request(arrival=0.0, backend="python", **kw):
    cfg = make_config(slots=1, load={8: 0.0})
    return simulate_requests([Request(0, 0, arrival, 10, 3)], {0: 8}, cfg, arrival + 10.0, backend=backend, **kw)


def test_constant_latency_request(backend):
    r = one_request(backend=backend)
    assert r.first_token_time[0] == pytest.approx(0.1)
    assert r.completion_time[0] == pytest.approx(0.3)
    itl = np.repeat(r.itl_values, r.itl_counts)
    np.testing.assert_allclose(itl, [0.1, 0.1])
    np.testing.assert_allclose(r.token_emit_times[0], [0.1, 0.2, 0.3])
    assert r.iterations == 3


def test_idle_jump_to_first_arrival(backend):
    r = one_request(arrival=7.0, backend=backend)
    assert r.first_token_time[0] == pytest.approx(7.1)
    assert r.completion_time[0] == pytest.approx(7.3)
    assert r.end_time == pytest.approx(7.3)


def test_hand_traced_g1_script(backend):
    fx = json.loads((FIXTURES / "hand_trace_g1.json").read_text())
    c = fx["config"]
    cfg = make_config(slots=c["slots"], k={"k5": c["k5"], "k7": c["k7"]}, budget=c["capacity_tokens"],
                      load={8: c["load_rank8_s"]})
    reqs = [Request(r["request_id"], r["adapter_id"], r["arrival_s"], r["input_tokens"], r["output_tokens"])
            for r in fx["requests"]]
    res = simulate_requests(reqs, {0: 8, 1: 8}, cfg, 2.0, backend=backend)
    exp = fx["expected"]
    np.testing.assert_allclose(res.first_token_time, exp["first_token_s"], atol=1e-12)
    np.testing.assert_allclose(res.completion_time, exp["completion_s"], atol=1e-12)
    np.testing.assert_allclose(res.load_time, [e["time_s"] for e in exp["load_events"]], atol=1e-12)
    assert res.load_adapter.tolist() == [e["adapter_id"] for e in exp["load_events"]]
    assert res.end_time == pytest.approx(exp["end_time_s"])
    assert res.iterations == exp["iterations"]


def test_single_request_filling_kv_exactly(backend):
    # input 10, output 3 needs at most 13 tokens (the last token needs no reservation)
    cfg = make_config(budget=13)
    r = simulate_requests([Request(0, 0, 0.0, 10, 3)], {0: 8}, cfg, 5.0, backend=backend)
    assert STATUS_NAMES[r.status[0]] == "finished"
    cfg = make_config(budget=12)
    with pytest.raises(SimulationError) as exc:
        simulate_requests([Request(42, 0, 0.0, 10, 3)], {0: 8}, cfg, 5.0, backend=backend)
    assert exc.value.request_id == 42
    assert "single request exceeds KV capacity" in str(exc.value)


def test_oversized_input_rejected(backend):
    cfg = make_config(budget=20)
    reqs = [Request(0, 0, 0.0, 25, 3), Request(1, 0, 0.5, 5, 3)]
    r = simulate_requests(reqs, {0: 8}, cfg, 5.0, backend=backend)
    assert [STATUS_NAMES[s] for s in r.status] == ["rejected", "finished"]
    assert compute_metrics(r).rejected_count == 1


def test_zero_capacity_is_config_error():
    cfg = make_config(budget=1000, base_cost=2000.0)
    with pytest.raises(ConfigError):
        simulate_requests([Request(0, 0, 0.0, 10, 3)], {0: 8}, cfg, 5.0)


def with_budget(cfg, budget, base_cost=None):
    mem = cfg.estimators.memory
    mem = replace(mem, total_kv_budget=budget, base_cost=mem.base_cost if base_cost is None else base_cost)
    return replace(cfg, estimators=replace(cfg.estimators, memory=mem))


def wl(rates, ranks=None, duration=120.0, seed=0, lengths=None):
    ranks = ranks or [8] * len(rates)
    return WorkloadSpec(tuple(AdapterSpec(i, k, r) for i, (r, k) in enumerate(zip(rates, ranks))),
                        lengths or LengthSpec.mean(250, 180, 231, 170), duration, seed)


def results_equal(a, b):
    for name in ("first_token_time", "completion_time", "status", "tokens_generated", "preemption_count",
                 "itl_values", "itl_counts", "load_time", "load_adapter", "load_latency"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name), err_msg=name)
    assert (a.window_tokens, a.end_time, a.iterations, a.truncated) == (b.window_tokens, b.end_time, b.iterations,
                                                                         b.truncated)


@pytest.mark.skipif(not native_available(), reason="native core not built")
@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.05, 3.0), min_size=1, max_size=6), st.integers(1, 6), st.integers(0, 10_000),
       st.booleans(), st.integers(3_000, 200_000))
def test_native_matches_python(rates, slots, seed, priority, budget):
    cfg = replace(with_budget(preset_config(slots), budget), loaded_adapter_priority=priority)
    w = wl(rates, [8, 16, 32, 8, 16, 32][:len(rates)], duration=60.0, seed=seed,
           lengths=LengthSpec.mean(120, 80, 60, 40))
    try:
        py = run_simulation(w, cfg, backend="python")
    except (SimulationError, ConfigError) as err:
        with pytest.raises(type(err)):
            run_simulation(w, cfg, backend="native")
        return
    nat = run_simulation(w, cfg, backend="native")
    results_equal(py, nat)
    for x, y in zip(py.token_emit_times, nat.token_emit_times):
        np.testing.assert_array_equal(x, y)


def test_debug_invariants_hold_under_pressure():
    cfg = with_budget(preset_config(2), 2000, base_cost=0.0)
    w = wl([1.0, 1.0, 0.5], [8, 16, 32], duration=40.0, seed=3, lengths=LengthSpec.mean(200, 50, 150, 50))
    r = run_simulation(w, cfg, backend="python", debug=True)
    assert r.preemption_count.sum() > 0  # the scenario exercises preemption
    assert r.finished_mask().all()


def test_deterministic(backend):
    w = wl([0.5, 0.3], duration=100.0, seed=9)
    a = run_simulation(w, preset_config(1), backend=backend)
    b = run_simulation(w, preset_config(1), backend=backend)
    results_equal(a, b)
    ja = {k: v for k, v in a.to_json().items() if k != "metadata"}
    jb = {k: v for k, v in b.to_json().items() if k != "metadata"}
    assert json.dumps(ja, sort_keys=True) == json.dumps(jb, sort_keys=True)


def test_clock_is_sum_of_steps_plus_idle_jumps(backend):
    w = wl([0.2, 0.1], duration=200.0, seed=5)
    r = run_simulation(w, preset_config(1), backend=backend, record_iterations=True)
    tr = r.iteration_trace
    t = np.asarray(tr["time"])
    lat = np.asarray(tr["lat_step"])
    ends = t[:-1] + lat[:-1]
    gaps = t[1:] - ends
    assert np.all(gaps >= 0)
    jumped = gaps > 0
    # every idle jump lands exactly on an arrival
    assert np.isin(t[1:][jumped], r.arrival).all()
    assert r.end_time == pytest.approx(t[-1] + lat[-1], abs=0)
    total = lat.sum() + gaps.sum() + t[0]
    assert total == pytest.approx(r.end_time, rel=1e-12)


def test_token_conservation(backend):
    w = wl([1.0, 0.7, 0.4], [8, 16, 32], duration=120.0, seed=2)
    r = run_simulation(w, preset_config(2), backend=backend)
    fin = r.finished_mask()
    assert (r.tokens_generated[fin] == r.output_tokens[fin]).all()
    assert sum(len(x) for x in r.token_emit_times) == int(r.tokens_generated.sum())
    assert int(r.itl_counts.sum()) == int((r.tokens_generated[r.tokens_generated > 0] - 1).sum())


def test_drains_with_enough_slots(backend):
    w = wl([0.3, 0.3, 0.3], duration=200.0, seed=1)
    r = run_simulation(w, preset_config(3), backend=backend)
    assert r.drained
    assert r.finished_mask().all()
    # each adapter loaded exactly once
    assert sorted(r.load_adapter.tolist()) == [0, 1, 2]


def test_non_drain_stops_at_duration(backend):
    w = wl([3.0], duration=30.0, seed=1)
    cfg = preset_config(1)
    cfg = replace(cfg, drain=False)
    r = run_simulation(w, cfg, backend=backend)
    assert not r.drained
    assert r.end_time >= 30.0


def test_max_iterations_truncates(backend):
    cfg = preset_config(1)
    cfg = replace(cfg, max_iterations=50)
    r = run_simulation(wl([2.0], duration=60.0), cfg, backend=backend)
    assert r.truncated and r.iterations == 50


def test_mean_and_full_mode_agree():
    rng = np.random.default_rng(0)
    pairs = [(int(max(1, x)), int(max(1, y))) for x, y in zip(rng.lognormal(5.3, 0.6, 500),
                                                               rng.lognormal(5.2, 0.6, 500))]
    w = wl([0.4] * 8, [8, 16, 32, 8, 16, 32, 8, 16], duration=600.0, seed=4, lengths=LengthSpec.full(pairs))
    full = compute_metrics(run_simulation(w, preset_config(8), mode="full"))
    mean = compute_metrics(run_simulation(w, preset_config(8), mode="mean"))
    assert abs(full.throughput_tok_s - mean.throughput_tok_s) / full.throughput_tok_s < 0.10


def test_full_mode_needs_lists():
    from loratwin.errors import ValidationError
    with pytest.raises(ValidationError):
        run_simulation(wl([0.1]), preset_config(1), mode="full")


def test_result_json_validates():
    from loratwin.schemas import validate
    r = run_simulation(wl([0.2], duration=30.0), preset_config(1))
    r.metrics = compute_metrics(r)
    doc = r.to_json(include_requests=True)
    validate(doc, "simulation_result")
    assert doc["metadata"]["backend"] in BACKENDS


def test_debug_checker_detects_ledger_leak(monkeypatch):
    import loratwin.engine as engine
    from loratwin.engine import InvariantViolation

    real = engine.decode_step_alloc

    def leaky(state):
        out = real(state)
        state.ledger.used_tokens += 1
        return out

    monkeypatch.setattr(engine, "decode_step_alloc", leaky)
    with pytest.raises(InvariantViolation, match="ledger"):
        run_simulation(wl([0.5], duration=20.0), preset_config(1), backend="python", debug=True)


def _backend_in_subprocess(code, env_extra):
    import os
    import subprocess
    import sys

    env = dict(os.environ, **env_extra)
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                          check=True).stdout.strip()


def test_pure_python_env_forces_fallback():
    code = "from loratwin.engine import default_backend; print(default_backend())"
    assert _backend_in_subprocess(code, {"LORATWIN_PURE_PYTHON": "1"}) == "python"


def test_missing_extension_falls_back():
    code = ("import sys; sys.modules['loratwin._core'] = None\n"
            "from loratwin.engine import default_backend, native_available\n"
            "print(default_backend(), native_available())")
    assert _backend_in_subprocess(code, {}) == "python False"
