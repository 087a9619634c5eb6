import pytest
from hypothesis import given, settings, strategies as st

from loratwin.adapter_cache import SlotCache
from loratwin.errors import SimulationError
from loratwin.estimators import LoadLatencyTable, LoadSource


def test_cache_hit_refreshes_last_used():
    c = SlotCache(2, resident={0: [8, 1.0], 1: [8, 2.0]})
    assert c.ensure_loaded({0: 8}, 5.0) == []
    assert c.resident[0][1] == 5.0 and c.resident[1][1] == 2.0


def test_single_slot_swap():
    c = SlotCache(1, load_table=LoadLatencyTable({8: 0.05}), resident={0: [8, 0.0]})
    (ev,) = c.ensure_loaded({1: 8}, 3.0)
    assert (ev.adapter_id, ev.rank, ev.source, ev.latency_s, ev.time) == (1, 8, LoadSource.CPU, 0.05, 3.0)
    assert list(c.resident) == [1]


def test_lru_victim():
    c = SlotCache(2, resident={0: [8, 5.0], 1: [8, 9.0]})
    (ev,) = c.ensure_loaded({2: 16}, 10.0)
    assert ev.adapter_id == 2
    assert set(c.resident) == {1, 2}


def test_running_adapter_never_evicted():
    c = SlotCache(2, resident={0: [8, 1.0], 1: [8, 9.0]})
    c.ensure_loaded({0: 8, 2: 8}, 10.0)
    assert set(c.resident) == {0, 2}


def test_too_many_needed_aborts():
    with pytest.raises(SimulationError):
        SlotCache(1).ensure_loaded({0: 8, 1: 8}, 0.0)


def test_disk_source_prices_loads():
    c = SlotCache(1, source=LoadSource.DISK, load_table=LoadLatencyTable({8: 0.05}, 1.7))
    (ev,) = c.ensure_loaded({0: 8}, 0.0)
    assert ev.latency_s == pytest.approx(0.085)


def test_is_loadable():
    c = SlotCache(1, resident={0: [8, 0.0]})
    assert c.is_loadable(0, {0})
    assert not c.is_loadable(1, {0})
    assert c.is_loadable(1, set())  # A idle, evictable
    c2 = SlotCache(2, resident={0: [8, 0.0]})
    assert c2.is_loadable(1, {0})


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 4), st.lists(st.sets(st.integers(0, 7), min_size=1, max_size=4), min_size=1, max_size=40))
def test_lru_properties(slots, batches):
    c = SlotCache(slots)
    seen = set()
    loads = 0
    for t, batch in enumerate(batches):
        batch = set(sorted(batch)[:slots])
        loads += len(c.ensure_loaded({a: 8 for a in batch}, float(t), record_evictions=True))
        seen |= batch
        assert len(c.resident) <= slots
        assert batch <= set(c.resident)
        assert set(c.resident) <= seen  # no prefetching
    for _, victim, last_used, idle in c.evictions:
        assert last_used == min(idle)
    if slots >= len(seen):
        assert loads == len(seen)  # each adapter loaded once
