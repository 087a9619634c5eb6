"""GPU adapter slots with LRU replacement."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import SimulationError
from .estimators import LoadLatencyTable, LoadSource


@dataclass(frozen=True)
class LoadEvent:
    time: float
    adapter_id: int
    rank: int
    source: LoadSource
    latency_s: float


@dataclass
class SlotCache:
    capacity_slots: int
    source: LoadSource = LoadSource.CPU
    load_table: LoadLatencyTable | None = None
    # adapter_id -> [rank, last_used]
    resident: dict[int, list] = field(default_factory=dict)
    evictions: list = field(default_factory=list)  # (time, victim, last_used, idle residents' last_used)

    def is_loadable(self, adapter_id: int, running_adapters: Iterable[int]) -> bool:
        """Can ``adapter_id`` get a slot next to ``running_adapters``?

        True iff the adapter is already in use by the batch or the batch
        claims fewer than all slots.  When every running adapter is resident
        this is exactly "resident, or a free slot, or an idle resident that
        can be evicted".
        """
        running = running_adapters if isinstance(running_adapters, (set, frozenset, dict)) else set(running_adapters)
        return adapter_id in running or len(running) < self.capacity_slots

    def ensure_loaded(self, needed: Mapping[int, int], now: float, record_evictions: bool = False) -> list[LoadEvent]:
        """Make every adapter in ``needed`` (adapter_id -> rank) resident.

        Missing adapters are loaded in ascending adapter_id order; each load
        evicts the least recently used resident that the batch does not use
        (ties broken by adapter_id).
        """
        if len(needed) > self.capacity_slots:
            raise SimulationError(
                f"batch needs {len(needed)} adapters but only {self.capacity_slots} slots exist"
            )
        events = []
        resident = self.resident
        for adapter_id in sorted(a for a in needed if a not in resident):
            if len(resident) >= self.capacity_slots:
                idle = [(info[1], a) for a, info in resident.items() if a not in needed]
                if not idle:
                    raise SimulationError("no idle adapter to evict")
                last_used, victim = min(idle)
                if record_evictions:
                    self.evictions.append((now, victim, last_used, [t for t, _ in idle]))
                del resident[victim]
            rank = needed[adapter_id]
            latency = self.load_table.seconds(rank, self.source) if self.load_table is not None else 0.0
            resident[adapter_id] = [rank, now]
            events.append(LoadEvent(now, adapter_id, rank, self.source, latency))
        for adapter_id in needed:
            resident[adapter_id][1] = now
        return events
