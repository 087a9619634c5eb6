"""The serving loop.

Every iteration: admit arrivals that are due, retire finished requests,
reserve next-token KV (preempting if needed), admit from the waiting queue,
load missing adapters, price the step with the estimators and emit one token
per running request.  When nothing runs, the clock jumps to the next arrival.

Two interchangeable backends run this loop: the compiled ``_core`` module and
the pure-Python implementation below, which is also the instrumented
reference used by the invariant checks.  Both produce identical results.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapter_cache import SlotCache
from .config import ServerConfig
from .errors import ConfigError, SimulationError, ValidationError
from .estimators import LoadSource, mem_max, step_latency
from .kv_scheduler import (
    KvLedger,
    Phase,
    RequestState,
    WaitingQueue,
    admit,
    complete_finished,
    decode_step_alloc,
)
from .workload import LengthMode, Request, RequestArrays, WorkloadSpec, arrival_arrays

try:
    from . import _core
except ImportError:  # pragma: no cover - depends on the build
    _core = None

PURE_PYTHON_ENV = "LORATWIN_PURE_PYTHON"


def native_available() -> bool:
    return _core is not None


def default_backend() -> str:
    if _core is None or os.environ.get(PURE_PYTHON_ENV, "") not in ("", "0"):
        return "python"
    return "native"


STATUS_NAMES = {int(p): p.name.lower() for p in Phase}


@dataclass
class SimulationResult:
    request_id: np.ndarray
    adapter_id: np.ndarray
    arrival: np.ndarray
    input_tokens: np.ndarray
    output_tokens: np.ndarray
    first_token_time: np.ndarray  # nan if no token was emitted
    completion_time: np.ndarray  # nan if unfinished
    tokens_generated: np.ndarray
    preemption_count: np.ndarray
    status: np.ndarray  # Phase values
    itl_values: np.ndarray  # grouped inter-token intervals
    itl_counts: np.ndarray
    window_tokens: int  # output tokens emitted at or before `duration`
    duration: float
    end_time: float
    iterations: int
    truncated: bool
    drained: bool
    capacity_tokens: int
    slots: int
    n_served: int
    load_time: np.ndarray
    load_adapter: np.ndarray
    load_rank: np.ndarray
    load_latency: np.ndarray
    load_source: str = "cpu"
    token_emit_times: list | None = None
    iteration_trace: dict | None = None
    config: dict = field(default_factory=dict)
    workload: dict | None = None
    mode: str = "full"
    backend: str = "python"
    wall_time_s: float = 0.0
    metrics: object = None

    @property
    def n_requests(self) -> int:
        return len(self.arrival)

    def finished_mask(self) -> np.ndarray:
        return self.status == int(Phase.FINISHED)

    def rejected_mask(self) -> np.ndarray:
        return self.status == int(Phase.REJECTED)

    def requests_json(self) -> list[dict]:
        out = []
        for i in range(self.n_requests):
            rec = {
                "request_id": int(self.request_id[i]),
                "adapter_id": int(self.adapter_id[i]),
                "arrival_s": float(self.arrival[i]),
                "input_tokens": int(self.input_tokens[i]),
                "output_tokens": int(self.output_tokens[i]),
                "first_token_s": _opt(self.first_token_time[i]),
                "completion_s": _opt(self.completion_time[i]),
                "tokens_generated": int(self.tokens_generated[i]),
                "preemption_count": int(self.preemption_count[i]),
                "status": STATUS_NAMES[int(self.status[i])],
            }
            if self.token_emit_times is not None:
                rec["token_times_s"] = [float(t) for t in self.token_emit_times[i]]
            out.append(rec)
        return out

    def to_json(self, include_requests: bool = True) -> dict:
        """Semantic content plus a separate ``metadata`` block (wall time, backend)."""
        doc = {
            "mode": self.mode,
            "config": self.config,
            "workload": self.workload,
            "summary": {
                "duration_s": self.duration,
                "end_time_s": self.end_time,
                "iterations": self.iterations,
                "truncated": self.truncated,
                "drained": self.drained,
                "capacity_tokens": self.capacity_tokens,
                "slots": self.slots,
                "served_adapters": self.n_served,
                "requests": self.n_requests,
                "window_tokens": self.window_tokens,
                "load_events": len(self.load_time),
            },
            "metrics": self.metrics.to_json() if self.metrics is not None else None,
            "load_events": [
                {"time_s": float(t), "adapter_id": int(a), "rank": int(r),
                 "source": self.load_source, "latency_s": float(l)}
                for t, a, r, l in zip(self.load_time, self.load_adapter, self.load_rank, self.load_latency)
            ],
        }
        if include_requests:
            doc["requests"] = self.requests_json()
        doc["metadata"] = {"wall_time_s": self.wall_time_s, "backend": self.backend}
        return doc

    def iteration_rows(self):
        tr = self.iteration_trace
        if tr is None:
            return []
        return list(zip(tr["time"], tr["iteration"], tr["r_running"], tr["r_waiting"],
                        tr["a_running"], tr["lat_step"], tr["loads"]))


def _opt(x):
    x = float(x)
    return None if math.isnan(x) else x


@dataclass
class _Setup:
    arrays: RequestArrays
    request_ids: np.ndarray
    adapter_index: np.ndarray  # per request, index into adapter_ids
    adapter_ids: np.ndarray  # sorted
    ranks: np.ndarray  # per adapter index
    load_s: np.ndarray  # per adapter index
    capacity: int
    slots: int
    n_served: int
    ratio: float
    config: ServerConfig
    duration: float


def _prepare(arrays: RequestArrays, request_ids, adapter_ranks: dict, config: ServerConfig,
             duration: float, n_served: int | None) -> _Setup:
    if not adapter_ranks:
        raise ValidationError("adapters", "must be non-empty")
    est = config.estimators
    est.coefficients.check()
    adapter_ids = np.asarray(sorted(adapter_ranks), dtype=np.int64)
    ranks = np.asarray([adapter_ranks[a] for a in adapter_ids], dtype=np.int64)
    pos = {int(a): i for i, a in enumerate(adapter_ids)}
    try:
        adapter_index = np.asarray([pos[int(a)] for a in arrays.adapter_id], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError("requests[].adapter_id", f"unknown adapter {exc.args[0]}") from None
    load_s = np.asarray([est.load.seconds(int(r), config.load_source) for r in ranks], dtype=np.float64)
    slot_rank = config.slot_rank if config.slot_rank is not None else int(ranks.max())
    capacity = mem_max(est.memory, config.slots, [slot_rank] * config.slots)
    if capacity <= 0:
        raise ConfigError(f"no KV capacity left with {config.slots} slots of rank {slot_rank}")
    n_served = len(adapter_ids) if n_served is None else n_served
    ratio = config.slots / n_served
    if ratio > 1.0:
        ratio = 1.0
    return _Setup(arrays, np.asarray(request_ids, dtype=np.int64), adapter_index, adapter_ids, ranks,
                  load_s, capacity, config.slots, n_served, ratio, config, float(duration))


def run_simulation(workload: WorkloadSpec, config: ServerConfig, mode: str | None = None, *,
                   backend: str | None = None, record_tokens: bool = True,
                   record_iterations: bool = False, debug: bool = False) -> SimulationResult:
    """Simulate ``workload`` on a server configured by ``config``.

    ``mode`` is "full" or "mean"; "mean" replaces per-request length lists by
    their mean and std.  Defaults to the workload's own length mode.
    """
    mode = _resolve_mode(workload, mode)
    wl = workload.with_mean_lengths() if mode == "mean" else workload
    arrays = arrival_arrays(wl)
    ranks = {a.adapter_id: a.rank for a in wl.adapters}
    result = simulate_requests(arrays, ranks, config, wl.duration, backend=backend,
                               record_tokens=record_tokens, record_iterations=record_iterations,
                               debug=debug)
    result.workload = workload.to_json()
    result.mode = mode
    return result


def _resolve_mode(workload: WorkloadSpec, mode: str | None) -> str:
    own = "mean" if workload.lengths.mode is LengthMode.MEAN else "full"
    if mode is None:
        return own
    mode = str(mode).lower()
    if mode not in ("full", "mean"):
        raise ValidationError("mode", f"expected 'full' or 'mean', got {mode!r}")
    if mode == "full" and (own == "mean" or any(
            a.lengths is not None and a.lengths.mode is LengthMode.MEAN for a in workload.adapters)):
        raise ValidationError("mode", "full mode needs per-request length lists")
    return mode


def simulate_requests(requests, adapter_ranks: dict, config: ServerConfig, duration: float, *,
                      n_served: int | None = None, backend: str | None = None,
                      record_tokens: bool = True, record_iterations: bool = False,
                      debug: bool = False) -> SimulationResult:
    """Run an explicit request stream (``RequestArrays`` or a sorted list of ``Request``)."""
    if isinstance(requests, RequestArrays):
        arrays = requests
        request_ids = np.arange(len(arrays), dtype=np.int64)
    else:
        reqs = list(requests)
        arrays = RequestArrays.from_requests(reqs)
        request_ids = np.asarray([r.request_id for r in reqs], dtype=np.int64)
    setup = _prepare(arrays, request_ids, adapter_ranks, config, duration, n_served)
    backend = backend or default_backend()
    if debug:
        backend = "python"
    if backend == "native" and _core is None:
        raise ConfigError("native core is not built")
    t0 = time.perf_counter()
    if backend == "native":
        result = _run_native(setup, record_tokens, record_iterations)
    elif backend == "python":
        result = _run_python(setup, record_tokens, record_iterations, debug)
    else:
        raise ConfigError(f"unknown backend {backend!r}")
    result.wall_time_s = time.perf_counter() - t0
    result.backend = backend
    result.config = config.to_json()
    return result


# --------------------------------------------------------------------------
# pure-Python backend


@dataclass
class SimState:
    clock: float
    ledger: KvLedger
    cache: SlotCache
    waiting: WaitingQueue
    slots: int
    loaded_adapter_priority: bool
    running: list = field(default_factory=list)
    batch_counts: dict = field(default_factory=dict)  # adapter index -> running requests
    rejected: list = field(default_factory=list)
    states: list = field(default_factory=list)  # per request, None until arrival


def _run_python(s: _Setup, record_tokens: bool, record_iterations: bool, debug: bool) -> SimulationResult:
    cfg = s.config
    coeffs = cfg.estimators.coefficients
    arr = s.arrays
    n = len(arr)
    arrival = arr.arrival.tolist()
    adapter_index = s.adapter_index.tolist()
    ranks = s.ranks.tolist()
    load_by_adapter = s.load_s.tolist()
    capacity = s.capacity
    duration = s.duration
    drain = cfg.drain
    max_iter = cfg.max_iterations
    ratio = s.ratio

    st = SimState(0.0, KvLedger(capacity), SlotCache(s.slots, cfg.load_source), WaitingQueue(n),
                  s.slots, cfg.loaded_adapter_priority)
    st.states = [None] * n
    checker = _InvariantChecker(st, n) if debug else None

    itl_values: list[float] = []
    itl_counts: list[int] = []
    load_time, load_adapter, load_latency = [], [], []
    trace = {k: [] for k in ("time", "iteration", "r_running", "r_waiting", "a_running", "lat_step", "loads")} \
        if record_iterations else None
    window_tokens = 0
    iterations = 0
    truncated = False
    drained = False
    clock = 0.0
    nxt = 0
    input_tokens = arr.input_tokens.tolist()
    output_tokens = arr.output_tokens.tolist()

    while True:
        while nxt < n and arrival[nxt] <= clock:
            req = Request(int(s.request_ids[nxt]), int(arr.adapter_id[nxt]), arrival[nxt],
                          input_tokens[nxt], output_tokens[nxt])
            rs = RequestState(req, nxt, adapter_index[nxt])
            if record_tokens:
                rs.token_emit_times = []
            st.states[nxt] = rs
            if input_tokens[nxt] + 1 > capacity:
                rs.phase = Phase.REJECTED
                st.rejected.append(rs)
            else:
                st.waiting.push(rs)
            nxt += 1
        complete_finished(st, clock)
        if not st.running and not len(st.waiting) and nxt >= n:
            drained = True
            break
        if not drain and clock >= duration:
            break
        if iterations >= max_iter:
            truncated = True
            break
        preempted = decode_step_alloc(st)
        admitted = admit(st, clock)
        if checker:
            checker.after_schedule(preempted, admitted)
        running = st.running
        if not running:
            if len(st.waiting):
                head = st.waiting.peek()
                raise SimulationError("single request exceeds KV capacity", head.request.request_id)
            if checker:
                checker.idle_jump(arrival[nxt] - clock)
            clock = arrival[nxt]
            continue

        needed = {a: ranks[a] for a in st.batch_counts}
        events = st.cache.ensure_loaded(needed, clock, record_evictions=debug)
        load_s = 0.0
        for ev in events:
            lat_a = load_by_adapter[ev.adapter_id]
            load_s += lat_a
            load_time.append(clock)
            load_adapter.append(ev.adapter_id)
            load_latency.append(lat_a)
        r_running = len(running)
        r_waiting = len(st.waiting)
        a_running = len(st.batch_counts)
        lat = step_latency(coeffs, r_running, r_waiting, ratio, a_running, load_s)
        if checker:
            checker.before_emit(lat)
        if trace is not None:
            trace["time"].append(clock)
            trace["iteration"].append(iterations)
            trace["r_running"].append(r_running)
            trace["r_waiting"].append(r_waiting)
            trace["a_running"].append(a_running)
            trace["lat_step"].append(lat)
            trace["loads"].append(len(events))

        t = clock + lat
        cont = 0
        for rs in running:
            if rs.tokens_generated == 0:
                rs.first_token_time = t
            elif rs.last_emit_time == clock:
                cont += 1
            else:
                itl_values.append(t - rs.last_emit_time)
                itl_counts.append(1)
            rs.tokens_generated += 1
            rs.last_emit_time = t
            if record_tokens:
                rs.token_emit_times.append(t)
            if rs.tokens_generated == rs.request.output_tokens:
                rs.completion_time = t
        if t <= duration:
            window_tokens += r_running
        if cont:
            itl_values.append(t - clock)
            itl_counts.append(cont)
        clock = t
        iterations += 1
        if checker:
            checker.after_emit(clock)

    if checker:
        checker.finish(clock, nxt)

    first = np.full(n, np.nan)
    comp = np.full(n, np.nan)
    gen = np.zeros(n, dtype=np.int64)
    pre = np.zeros(n, dtype=np.int64)
    status = np.zeros(n, dtype=np.int8)
    emits = [] if record_tokens else None
    for i, rs in enumerate(st.states):
        if rs is None:
            if record_tokens:
                emits.append(np.empty(0))
            continue
        status[i] = int(rs.phase)
        gen[i] = rs.tokens_generated
        pre[i] = rs.preemption_count
        if rs.first_token_time is not None:
            first[i] = rs.first_token_time
        if rs.completion_time is not None:
            comp[i] = rs.completion_time
        if record_tokens:
            emits.append(np.asarray(rs.token_emit_times, dtype=np.float64))
    load_adapter_idx = np.asarray(load_adapter, dtype=np.int64)
    return _result(s, first, comp, gen, pre, status,
                   np.asarray(itl_values, dtype=np.float64), np.asarray(itl_counts, dtype=np.int64),
                   window_tokens, clock, iterations, truncated, drained,
                   np.asarray(load_time, dtype=np.float64), load_adapter_idx,
                   np.asarray(load_latency, dtype=np.float64), emits,
                   {k: np.asarray(v) for k, v in trace.items()} if trace is not None else None)


def _result(s: _Setup, first, comp, gen, pre, status, itl_values, itl_counts, window_tokens, clock,
            iterations, truncated, drained, load_time, load_adapter_idx, load_latency, emits, trace):
    arr = s.arrays
    return SimulationResult(
        request_id=s.request_ids,
        adapter_id=np.asarray(arr.adapter_id, dtype=np.int64),
        arrival=np.asarray(arr.arrival, dtype=np.float64),
        input_tokens=np.asarray(arr.input_tokens, dtype=np.int64),
        output_tokens=np.asarray(arr.output_tokens, dtype=np.int64),
        first_token_time=first,
        completion_time=comp,
        tokens_generated=gen,
        preemption_count=pre,
        status=status,
        itl_values=itl_values,
        itl_counts=itl_counts,
        window_tokens=int(window_tokens),
        duration=s.duration,
        end_time=float(clock),
        iterations=int(iterations),
        truncated=bool(truncated),
        drained=bool(drained),
        capacity_tokens=int(s.capacity),
        slots=s.slots,
        n_served=s.n_served,
        load_time=load_time,
        load_adapter=s.adapter_ids[load_adapter_idx] if len(load_adapter_idx) else np.empty(0, dtype=np.int64),
        load_rank=s.ranks[load_adapter_idx] if len(load_adapter_idx) else np.empty(0, dtype=np.int64),
        load_latency=load_latency,
        load_source=LoadSource(s.config.load_source).value,
        token_emit_times=emits,
        iteration_trace=trace,
    )


# --------------------------------------------------------------------------
# native backend


def _run_native(s: _Setup, record_tokens: bool, record_iterations: bool) -> SimulationResult:
    cfg = s.config
    c = cfg.estimators.coefficients
    arr = s.arrays
    out = _core.run_core(
        np.ascontiguousarray(arr.arrival, dtype=np.float64),
        np.ascontiguousarray(s.adapter_index, dtype=np.int64),
        np.ascontiguousarray(arr.input_tokens, dtype=np.int64),
        np.ascontiguousarray(arr.output_tokens, dtype=np.int64),
        np.ascontiguousarray(s.load_s, dtype=np.float64),
        int(s.capacity), int(s.slots), float(s.ratio),
        np.asarray([c.k1, c.k2, c.k3, c.k4, c.k5, c.k6, c.k7], dtype=np.float64),
        float(s.duration), bool(cfg.drain), int(cfg.max_iterations), bool(cfg.loaded_adapter_priority),
        bool(record_tokens), bool(record_iterations),
    )
    if out["error"] is not None:
        message, index = out["error"]
        raise SimulationError(message, int(s.request_ids[index]))
    emits = None
    if record_tokens:
        flat = out["emit_times"]
        offsets = out["emit_offsets"]
        gen = out["generated"]
        emits = [flat[offsets[i]:offsets[i] + gen[i]].copy() for i in range(len(gen))]
    return _result(s, out["first_token"], out["completion"], out["generated"], out["preemptions"],
                   out["status"], out["itl_values"], out["itl_counts"], out["window_tokens"],
                   out["clock"], out["iterations"], out["truncated"], out["drained"],
                   out["load_time"], out["load_adapter"], out["load_latency"], emits,
                   out["trace"] if record_iterations else None)


# --------------------------------------------------------------------------
# instrumented checks (debug mode)


class InvariantViolation(AssertionError):
    pass


class _InvariantChecker:
    """Asserts ledger conservation, request lifecycle and token accounting
    every iteration of the Python backend."""

    _ALLOWED = {
        (Phase.WAITING, Phase.RUNNING),
        (Phase.RUNNING, Phase.FINISHED),
        (Phase.RUNNING, Phase.WAITING),  # via PREEMPTED, re-queued in the same step
        (Phase.WAITING, Phase.REJECTED),
    }

    def __init__(self, st: SimState, n: int):
        self.st = st
        self.n = n
        self.last_clock = 0.0
        self.clock_sum = 0.0
        self.prev_phase: dict[int, Phase] = {}
        self.iterations = 0
        self.emitted = 0

    def _fail(self, msg):
        raise InvariantViolation(msg)

    def _ledger(self):
        st = self.st
        held = sum(rs.kv_tokens_held for rs in st.running)
        if held != st.ledger.used_tokens:
            self._fail(f"ledger used {st.ledger.used_tokens} != held {held}")
        if not 0 <= st.ledger.used_tokens <= st.ledger.capacity_tokens:
            self._fail("ledger out of bounds")

    def _lifecycle(self):
        st = self.st
        ids = [rs.index for rs in st.running]
        if len(ids) != len(set(ids)):
            self._fail("duplicate running request")
        for rs in st.states:
            if rs is None:
                continue
            prev = self.prev_phase.get(rs.index, Phase.WAITING)
            cur = rs.phase
            if prev != cur and (prev, cur) not in self._ALLOWED:
                if not (prev == Phase.WAITING and cur == Phase.FINISHED):
                    self._fail(f"request {rs.index}: illegal transition {prev.name} -> {cur.name}")
            self.prev_phase[rs.index] = cur
            if rs.tokens_generated > rs.request.output_tokens:
                self._fail(f"request {rs.index} generated too many tokens")
            if cur == Phase.FINISHED and rs.tokens_generated != rs.request.output_tokens:
                self._fail(f"request {rs.index} finished early")
            if rs.token_emit_times is not None:
                if len(rs.token_emit_times) != rs.tokens_generated:
                    self._fail(f"request {rs.index} emit log length mismatch")
        waiting = st.waiting.ordered()
        if len(waiting) != len(st.waiting):
            self._fail("waiting count mismatch")
        in_running = {rs.index for rs in st.running}
        for rs in waiting:
            if rs.index in in_running:
                self._fail("request both waiting and running")
        states = [rs for rs in st.states if rs is not None]
        counts = {p: 0 for p in Phase}
        for rs in states:
            counts[rs.phase] += 1
        if counts[Phase.RUNNING] != len(st.running) or counts[Phase.WAITING] != len(st.waiting):
            self._fail("request partition mismatch")
        if counts[Phase.PREEMPTED]:
            self._fail("request left in PREEMPTED phase")

    def after_schedule(self, preempted, admitted):
        st = self.st
        self._ledger()
        self._lifecycle()
        for rs in st.running:
            if rs.kv_tokens_held != rs.request.input_tokens + rs.tokens_generated + 1:
                self._fail(f"request {rs.index} holds {rs.kv_tokens_held} KV tokens")
        if len(st.batch_counts) > st.slots:
            self._fail("batch uses more adapters than slots")

    def before_emit(self, lat):
        st = self.st
        if not lat > 0:
            self._fail("non-positive step latency")
        resident = st.cache.resident
        if len(resident) > st.slots:
            self._fail("residency exceeds slot count")
        for a in st.batch_counts:
            if a not in resident:
                self._fail(f"running adapter {a} not resident")
        for now, victim, last_used, idle in st.cache.evictions:
            if last_used != min(idle):
                self._fail("eviction did not pick the least recently used idle adapter")
        st.cache.evictions.clear()

    def after_emit(self, clock):
        st = self.st
        if clock < self.last_clock:
            self._fail("clock went backwards")
        self.clock_sum += clock - self.last_clock
        self.last_clock = clock
        self.iterations += 1
        self.emitted += len(st.running)
        generated = sum(rs.tokens_generated for rs in st.states if rs is not None)
        if generated != self.emitted:
            self._fail(f"{self.emitted} tokens emitted but {generated} counted as generated")
        for rs in st.running:
            times = rs.token_emit_times
            if times is not None and len(times) >= 2 and not times[-1] > times[-2]:
                self._fail(f"request {rs.index} emit times not increasing")
        self._ledger()

    def idle_jump(self, delta):
        if delta < 0:
            self._fail("idle jump backwards")

    def finish(self, clock, arrived):
        st = self.st
        for rs in st.states[:arrived]:
            if rs is None:
                self._fail("arrived request without state")
            if rs.phase == Phase.FINISHED and rs.tokens_generated != rs.request.output_tokens:
                self._fail("token conservation violated")
