"""Event engine determinism, scratchpad allocation, DMA and protocol timing."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wbpsim.costmodel import DmaTiming
from wbpsim.machine import (AllocationFailure, DmaEngine, Event, EventEngine,
                            EventKind, Machine, MachineConfig, PortDirection,
                            ProtocolViolation, RunState, SpmSection)

TIMING = DmaTiming(setup_cycles=20, bytes_per_cycle=16, csr_write_cycles=4)


def tick(t, **kw):
    return Event(time=t, kind=EventKind.SCHED_TICK, **kw)


# -- event engine -------------------------------------------------------------


def test_events_dispatch_in_time_then_post_order():
    engine = EventEngine()
    seen = []
    engine.post(tick(5, cluster=1))
    engine.post(tick(3, cluster=2))
    engine.post(tick(5, cluster=3))
    engine.run(lambda e: seen.append((e.time, e.cluster)))
    assert seen == [(3, 2), (5, 1), (5, 3)]


def test_post_in_past_rejected():
    engine = EventEngine()
    engine.post(tick(10))
    engine.run(lambda e: None)
    with pytest.raises(RuntimeError):
        engine.post(tick(5))


def test_handler_posts_preserve_order():
    engine = EventEngine()
    seen = []

    def handler(event):
        seen.append((event.time, event.cluster))
        if event.cluster == 0:
            engine.post(tick(event.time, cluster=10))  # same time, later seq
            engine.post(tick(event.time + 2, cluster=11))

    engine.post(tick(1, cluster=0))
    engine.post(tick(2, cluster=1))
    engine.run(handler)
    assert seen == [(1, 0), (1, 10), (2, 1), (3, 11)]


def test_run_until_advances_clock_on_empty_queue():
    engine = EventEngine()
    engine.run_until(42, lambda e: None)
    assert engine.now == 42


def test_digest_reproducible_and_seed_sensitive():
    def stream(order):
        engine = EventEngine()
        for t, c in order:
            engine.post(tick(t, cluster=c))
        engine.run(lambda e: None)
        return engine.digest()

    a = stream([(1, 0), (2, 1)])
    b = stream([(1, 0), (2, 1)])
    c = stream([(1, 0), (2, 2)])
    assert a == b
    assert a != c
    assert len(a) == 64 and a == a.lower()


def test_trace_output_does_not_change_digest(tmp_path):
    def run(trace):
        engine = EventEngine(trace_path=str(tmp_path / "t.jsonl") if trace else None)
        engine.post(tick(1, cluster=0))
        engine.post(tick(4, cluster=1))
        engine.run(lambda e: None)
        return engine.digest()

    assert run(False) == run(True)
    lines = (tmp_path / "t.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2 and '"kind": "sched_tick"' in lines[0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 100), min_size=1, max_size=30))
def test_dispatch_times_never_decrease(times):
    engine = EventEngine()
    seen = []
    for t in times:
        engine.post(tick(t))
    engine.run(lambda e: seen.append(e.time))
    assert seen == sorted(times)


# -- scratchpad allocator ---------------------------------------------------------


def test_alloc_free_restores_capacity():
    spm = SpmSection("s", 100)
    region = spm.alloc(60)
    assert spm.used == 60
    spm.free_region(region)
    assert spm.used == 0
    assert spm.would_fit(100)


def test_exact_fill_then_fail():
    spm = SpmSection("s", 64)
    spm.alloc(64)
    with pytest.raises(AllocationFailure):
        spm.alloc(1)


def test_first_fit_reuses_freed_hole():
    spm = SpmSection("s", 90)
    a = spm.alloc(30)
    b = spm.alloc(30)
    c = spm.alloc(30)
    spm.free_region(b)
    d = spm.alloc(30)
    assert spm.offset_of(d) == 30  # the hole in the middle
    del a, c
    spm.check()


def test_coalesced_holes_fit_large_request():
    spm = SpmSection("s", 90)
    a = spm.alloc(30)
    b = spm.alloc(30)
    spm.alloc(30)
    spm.free_region(a)
    spm.free_region(b)
    big = spm.alloc(60)  # adjacent holes behave as one
    assert spm.offset_of(big) == 0
    spm.check()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 40)), max_size=40))
def test_allocator_invariants_under_random_ops(ops):
    spm = SpmSection("s", 128)
    live = []
    for is_alloc, size in ops:
        if is_alloc or not live:
            try:
                live.append(spm.alloc(size))
            except AllocationFailure:
                pass
        else:
            spm.free_region(live.pop(size % len(live)))
        spm.check()
        assert spm.used <= spm.capacity


# -- DMA engine ---------------------------------------------------------------


def test_dma_serializes_transfers():
    dma = DmaEngine("d", TIMING)
    completions = [dma.reserve(0, 160)[1] for _ in range(3)]
    assert completions == [30, 60, 90]


def test_dma_idle_gap_restarts_at_request_time():
    dma = DmaEngine("d", TIMING)
    assert dma.reserve(0, 0) == (0, 20)
    assert dma.reserve(100, 16) == (100, 121)


# -- machine protocol ------------------------------------------------------------


def small_machine(strict=True, **kw):
    cfg = MachineConfig(clusters=1, tile_mix=("L", "S"), strict=strict, **kw)
    return Machine(cfg)


def test_set_port_direction_rules():
    machine = small_machine()
    tile = machine.clusters[0].tiles[0]
    assert machine.set_port_direction(tile, PortDirection.BUS) == 4
    machine.set_port_direction(tile, PortDirection.CORE)
    machine.set_port_direction(tile, PortDirection.BUS)
    assert tile.port is PortDirection.BUS
    tile.run_state = RunState.RUNNING
    with pytest.raises(ProtocolViolation):
        machine.set_port_direction(tile, PortDirection.CORE)


def test_lenient_mode_counts_instead_of_raising():
    machine = small_machine(strict=False)
    tile = machine.clusters[0].tiles[0]
    tile.run_state = RunState.RUNNING
    machine.set_port_direction(tile, PortDirection.CORE)
    assert machine.violations == 1


def test_deploy_latency_arithmetic():
    # 1000 B at defaults: 3 CSR writes (12) plus DMA 20 + ceil(1000/16) = 95.
    machine = small_machine()
    cluster = machine.clusters[0]
    tile = cluster.tiles[0]
    event = machine.begin_deploy(cluster, tile, 600, 400, now=0, ctx=None)
    assert event.time == 4 + 83
    assert tile.run_state is RunState.LOADING and tile.port is PortDirection.BUS
    machine.engine.run_until(event.time, lambda e: None)
    start = machine.finish_deploy(tile)
    assert start == event.time + 8
    assert start == 95
    assert tile.run_state is RunState.RUNNING and tile.port is PortDirection.CORE
    assert not tile.reset_active


def test_deploy_zero_bytes_latency():
    machine = small_machine()
    cluster = machine.clusters[0]
    tile = cluster.tiles[0]
    event = machine.begin_deploy(cluster, tile, 0, 0, now=0, ctx=None)
    machine.engine.run_until(event.time, lambda e: None)
    assert machine.finish_deploy(tile) == 3 * 4 + 20


def test_deploy_oversized_payload_fails_tile_stays_idle():
    machine = small_machine(tspm_bytes=512)
    cluster = machine.clusters[0]
    tile = cluster.tiles[0]
    with pytest.raises(AllocationFailure):
        machine.begin_deploy(cluster, tile, 400, 200, now=0, ctx=None)
    assert tile.run_state is RunState.IDLE


def test_deploy_busy_tile_rejected():
    machine = small_machine()
    cluster = machine.clusters[0]
    tile = cluster.tiles[0]
    machine.begin_deploy(cluster, tile, 8, 8, now=0, ctx=None)
    with pytest.raises(ProtocolViolation):
        machine.begin_deploy(cluster, tile, 8, 8, now=0, ctx=None)


def test_completion_protocol_and_interrupt_time():
    machine = small_machine()
    cluster = machine.clusters[0]
    tile = cluster.tiles[0]
    done = machine.begin_deploy(cluster, tile, 16, 16, now=0, ctx=None)
    machine.engine.run_until(done.time, lambda e: None)
    machine.finish_deploy(tile)
    machine.engine.run_until(500, lambda e: None)
    interrupt_time = machine.tile_finish(tile, return_count=2)
    assert interrupt_time == 500 + 4
    assert tile.return_value_count == 2
    assert tile.run_state is RunState.RETURNING and tile.port is PortDirection.BUS
    event = machine.begin_retrieval(cluster, tile, 320, interrupt_time, ctx=None)
    assert event.time >= interrupt_time + 20 + 20
    machine.engine.run_until(event.time, lambda e: None)
    machine.release_tile(tile, event.time)
    assert tile.run_state is RunState.IDLE
    assert tile.last_finish == event.time


def test_tile_finish_requires_running():
    machine = small_machine()
    tile = machine.clusters[0].tiles[0]
    with pytest.raises(ProtocolViolation):
        machine.tile_finish(tile, 1)


def test_main_transfer_single_csr_cost():
    machine = small_machine()
    event = machine.main_transfer(now=0, nbytes=160, cluster_id=0, thread=1,
                                  ctx=None)
    assert event.time == 4 + 30
    assert event.kind is EventKind.DMA_DONE


def test_check_invariants_catches_corruption():
    machine = small_machine()
    tile = machine.clusters[0].tiles[0]
    tile.run_state = RunState.RUNNING
    tile.port = PortDirection.BUS
    with pytest.raises(RuntimeError):
        machine.check_invariants()
