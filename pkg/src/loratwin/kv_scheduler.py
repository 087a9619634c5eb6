"""Running batch / waiting queue management.

Admission is FCFS with greedy KV reservation (prompt plus the next output
token).  When every adapter slot is claimed by the batch, requests of
adapters already in the batch may overtake slot-blocked requests, as vLLM
does.  A request that does not fit in KV memory stops the scan.

Decode steps reserve one more KV token per running request; on exhaustion
the most recently admitted requests are preempted (recompute semantics) and
return to the front of the waiting queue.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import SimulationError
from .workload import Request


class Phase(IntEnum):
    PENDING = 0
    WAITING = 1
    RUNNING = 2
    FINISHED = 3
    REJECTED = 4
    PREEMPTED = 5


@dataclass(slots=True, eq=False)
class RequestState:
    request: Request
    index: int  # position in the arrival-ordered stream
    adapter: int
    phase: Phase = Phase.PENDING
    tokens_generated: int = 0
    kv_tokens_held: int = 0
    first_token_time: float | None = None
    completion_time: float | None = None
    last_emit_time: float | None = None
    token_emit_times: list | None = None
    preemption_count: int = 0
    queue_key: int = -1

    def reservation(self) -> int:
        """KV tokens needed to (re)start: prompt, tokens already generated, next token."""
        return self.request.input_tokens + self.tokens_generated + 1


@dataclass
class KvLedger:
    capacity_tokens: int
    used_tokens: int = 0

    def free(self) -> int:
        return self.capacity_tokens - self.used_tokens

    def reserve(self, n: int):
        if self.used_tokens + n > self.capacity_tokens:
            raise SimulationError(f"KV ledger overflow: {self.used_tokens} + {n} > {self.capacity_tokens}")
        self.used_tokens += n

    def release(self, n: int):
        self.used_tokens -= n
        if self.used_tokens < 0:
            raise SimulationError("KV ledger underflow")


class WaitingQueue:
    """Waiting requests ordered by (preempted first, arrival order).

    Kept as one global heap plus one heap per adapter with lazy deletion, so
    that both "earliest overall" and "earliest of adapter a" are cheap.
    """

    def __init__(self, n_requests: int):
        self._offset = n_requests
        self._global: list[tuple[int, int, RequestState]] = []
        self._by_adapter: dict[int, list[tuple[int, int, RequestState]]] = {}
        self._count = 0
        self._pushes = 0

    def __len__(self):
        return self._count

    def push(self, rs: RequestState, front: bool = False):
        key = rs.index if front else rs.index + self._offset
        rs.queue_key = key
        rs.phase = Phase.WAITING
        self._pushes += 1
        entry = (key, self._pushes, rs)
        heapq.heappush(self._global, entry)
        heapq.heappush(self._by_adapter.setdefault(rs.adapter, []), entry)
        self._count += 1

    @staticmethod
    def _top(heap):
        while heap:
            key, _, rs = heap[0]
            if rs.phase is Phase.WAITING and rs.queue_key == key:
                return rs
            heapq.heappop(heap)
        return None

    def peek(self) -> RequestState | None:
        return self._top(self._global)

    def peek_adapter(self, adapter: int) -> RequestState | None:
        heap = self._by_adapter.get(adapter)
        return self._top(heap) if heap else None

    def take(self, rs: RequestState):
        """Remove ``rs``; the caller sets its new phase."""
        rs.queue_key = -1
        self._count -= 1

    def ordered(self) -> list[RequestState]:
        live = {id(rs): (key, rs) for key, _, rs in self._global
                if rs.phase is Phase.WAITING and rs.queue_key == key}
        return [rs for _, rs in sorted(live.values(), key=lambda e: e[0])]


def _start(state, rs: RequestState):
    need = rs.reservation()
    state.ledger.reserve(need)
    rs.kv_tokens_held = need
    rs.phase = Phase.RUNNING
    state.running.append(rs)
    counts = state.batch_counts
    counts[rs.adapter] = counts.get(rs.adapter, 0) + 1


def _stop(state, rs: RequestState):
    state.ledger.release(rs.kv_tokens_held)
    rs.kv_tokens_held = 0
    counts = state.batch_counts
    left = counts[rs.adapter] - 1
    if left:
        counts[rs.adapter] = left
    else:
        del counts[rs.adapter]


def admit(state, now: float) -> list[RequestState]:
    """Move admissible waiting requests into the running batch."""
    admitted = []
    waiting = state.waiting
    counts = state.batch_counts
    slots = state.slots
    while True:
        if len(counts) < slots:
            rs = waiting.peek()
        elif state.loaded_adapter_priority:
            rs = None
            for a in counts:
                cand = waiting.peek_adapter(a)
                if cand is not None and (rs is None or cand.queue_key < rs.queue_key):
                    rs = cand
        else:
            rs = waiting.peek()
            if rs is not None and rs.adapter not in counts:
                break  # head-of-line blocked on slots
        if rs is None:
            break
        if rs.tokens_generated == 0 and rs.reservation() > state.ledger.capacity_tokens:
            waiting.take(rs)
            rs.phase = Phase.REJECTED
            state.rejected.append(rs)
            continue
        if rs.reservation() > state.ledger.free():
            break  # strict FCFS on memory
        waiting.take(rs)
        _start(state, rs)
        admitted.append(rs)
    return admitted


def decode_step_alloc(state) -> list[RequestState]:
    """Reserve the next-token KV slot for every running request.

    Returns the preempted requests (most recently admitted first).
    """
    running = state.running
    ledger = state.ledger
    preempted = []
    while running and ledger.used_tokens + len(running) > ledger.capacity_tokens:
        if len(running) == 1:
            raise SimulationError("single request exceeds KV capacity", running[0].request.request_id)
        victim = running.pop()
        _stop(state, victim)
        victim.phase = Phase.PREEMPTED
        victim.preemption_count += 1
        preempted.append(victim)
    for rs in running:
        rs.kv_tokens_held += 1
    ledger.used_tokens += len(running)
    for rs in preempted:
        state.waiting.push(rs, front=True)
    return preempted


def complete_finished(state, now: float) -> list[RequestState]:
    done = [rs for rs in state.running if rs.tokens_generated == rs.request.output_tokens]
    if not done:
        return done
    state.running[:] = [rs for rs in state.running if rs.tokens_generated != rs.request.output_tokens]
    for rs in done:
        _stop(state, rs)
        rs.phase = Phase.FINISHED
    return done


@dataclass
class BatchView:
    """Minimal state holder for using the scheduler operations directly."""

    ledger: KvLedger
    slots: int
    waiting: WaitingQueue
    running: list = field(default_factory=list)
    batch_counts: dict = field(default_factory=dict)
    loaded_adapter_priority: bool = True
    rejected: list = field(default_factory=list)
