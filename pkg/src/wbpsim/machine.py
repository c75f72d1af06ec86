"""Timed hardware model: event engine, scratchpad allocators, DMA engines,
tiles and clusters, and the bundled deploy/retrieve protocol.

The event engine is strictly single-threaded: events are dispatched in
(time, seq) order, seq being assigned when the event is posted, so identical
configurations and seeds replay the exact same stream. A rolling SHA-256
over the dispatched stream serves as the run's trace digest.

The deploy protocol for a tile is: flip the scratchpad port to the bus, burst
code+data in over the cluster DMA, flip the port back to the core, release
the core's reset (3 CSR writes plus one burst). Completion mirrors it: the
tile posts its return-value count, the port flips back to the bus, an
interrupt reaches the cluster scheduler, and the DMA retrieves the results.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Callable

from .costmodel import DmaTiming, TileTiming, dma_cycles


class ProtocolViolation(RuntimeError):
    """A pack-and-ship invariant was broken (fatal in strict mode)."""


class AllocationFailure(RuntimeError):
    """A scratchpad section could not fit the request (caller backpressures)."""


class EventKind(enum.Enum):
    DMA_DONE = "dma_done"
    TILE_DONE = "tile_done"
    INTERRUPT = "interrupt"
    SCHED_TICK = "sched_tick"
    THREAD_ARRIVAL = "thread_arrival"


@dataclass
class Event:
    time: int
    kind: EventKind
    cluster: int = -1
    tile: int = -1
    thread: int = -1
    task: str = ""
    nbytes: int = 0
    ctx: Any = None  # dispatch context only; excluded from digest and trace
    seq: int = -1


class EventEngine:
    """Deterministic discrete-event core with a rolling trace digest.

    ``salt`` (typically the run seed) enters the digest first: event timing
    is data-independent, so runs differing only in payload values would
    otherwise hash identically.
    """

    def __init__(self, trace_path: str | None = None, salt: str = ""):
        self._heap: list[tuple[int, int, Event]] = []
        self._seq = 0
        self._now = 0
        self._digest = hashlib.sha256()
        if salt:
            self._digest.update(salt.encode())
            self._digest.update(b"\n")
        self._trace_fh = open(trace_path, "w", encoding="utf-8") if trace_path else None
        self.dispatched = 0

    @property
    def now(self) -> int:
        return self._now

    def post(self, event: Event) -> Event:
        if event.time < self._now:
            raise RuntimeError(f"cannot post event at t={event.time} before now={self._now}")
        event.seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, (event.time, event.seq, event))
        return event

    def _record(self, event: Event) -> None:
        line = (f"{event.time},{event.seq},{event.kind.value},{event.cluster},"
                f"{event.tile},{event.thread},{event.task},{event.nbytes}")
        self._digest.update(line.encode())
        self._digest.update(b"\n")
        if self._trace_fh is not None:
            self._trace_fh.write(json.dumps(
                {"t": event.time, "seq": event.seq, "kind": event.kind.value,
                 "cluster": event.cluster, "tile": event.tile,
                 "thread": event.thread, "task": event.task,
                 "bytes": event.nbytes},
                sort_keys=True) + "\n")

    def run(self, handler: Callable[[Event], None], max_events: int = 20_000_000) -> None:
        while self._heap:
            time, _, event = heapq.heappop(self._heap)
            if time < self._now:
                raise RuntimeError("event causality violated")
            self._now = time
            self._record(event)
            self.dispatched += 1
            if self.dispatched > max_events:
                raise RuntimeError("event budget exceeded; simulation diverged")
            handler(event)
        if self._trace_fh is not None:
            self._trace_fh.close()
            self._trace_fh = None

    def run_until(self, t: int, handler: Callable[[Event], None]) -> None:
        while self._heap and self._heap[0][0] <= t:
            time, _, event = heapq.heappop(self._heap)
            self._now = time
            self._record(event)
            self.dispatched += 1
            handler(event)
        self._now = max(self._now, t)

    def digest(self) -> str:
        return self._digest.hexdigest()


# ---------------------------------------------------------------------------
# scratchpad sections


class SpmSection:
    """First-fit byte allocator with hole coalescing (implicit via scanning)."""

    def __init__(self, name: str, capacity: int):
        if capacity <= 0:
            raise ValueError("section capacity must be positive")
        self.name = name
        self.capacity = capacity
        self.allocations: dict[int, tuple[int, int]] = {}
        self._next_region = 0

    @property
    def used(self) -> int:
        return sum(size for _, size in self.allocations.values())

    @property
    def free(self) -> int:
        return self.capacity - self.used

    def would_fit(self, nbytes: int) -> bool:
        return self._find_offset(nbytes) is not None

    def _find_offset(self, nbytes: int) -> int | None:
        if nbytes > self.capacity:
            return None
        taken = sorted(self.allocations.values())
        cursor = 0
        for offset, size in taken:
            if offset - cursor >= nbytes:
                return cursor
            cursor = offset + size
        if self.capacity - cursor >= nbytes:
            return cursor
        return None

    def alloc(self, nbytes: int) -> int:
        if nbytes <= 0:
            raise ValueError("allocation size must be positive")
        offset = self._find_offset(nbytes)
        if offset is None:
            raise AllocationFailure(f"{self.name}: no fit for {nbytes} bytes")
        region = self._next_region
        self._next_region += 1
        self.allocations[region] = (offset, nbytes)
        return region

    def free_region(self, region: int) -> None:
        if region not in self.allocations:
            raise RuntimeError(f"{self.name}: unknown region {region}")
        del self.allocations[region]

    def offset_of(self, region: int) -> int:
        return self.allocations[region][0]

    def check(self) -> None:
        spans = sorted(self.allocations.values())
        cursor = 0
        for offset, size in spans:
            if offset < cursor:
                raise RuntimeError(f"{self.name}: overlapping regions")
            cursor = offset + size
        if cursor > self.capacity:
            raise RuntimeError(f"{self.name}: allocation beyond capacity")


SECTION_NAMES = ("TASK_CODE_POOL", "FIFO_LISTS", "LOAD_INDICATION", "COMPUTE_DATA")


# ---------------------------------------------------------------------------
# DMA


class DmaEngine:
    """One in-flight burst at a time; later requests queue FIFO."""

    def __init__(self, name: str, timing: DmaTiming):
        self.name = name
        self.timing = timing
        self.busy_until = 0
        self.total_bytes = 0
        self.transfers = 0

    def reserve(self, request_time: int, nbytes: int) -> tuple[int, int]:
        """Returns (start, done) for a burst submitted at request_time."""
        start = max(request_time, self.busy_until)
        done = start + dma_cycles(nbytes, self.timing)
        self.busy_until = done
        self.total_bytes += nbytes
        self.transfers += 1
        return start, done


# ---------------------------------------------------------------------------
# tiles and clusters


class PortDirection(enum.Enum):
    BUS = "bus"
    CORE = "core"


class RunState(enum.Enum):
    IDLE = "idle"
    LOADING = "loading"
    RUNNING = "running"
    RETURNING = "returning"


TILE_CLASS_TIMING = {
    "L": TileTiming(lanes=16, vrf_count=32),
    "S": TileTiming(lanes=8, vrf_count=64),
}


@dataclass
class TileState:
    tile_id: int
    cluster_id: int
    tile_class: str
    timing: TileTiming
    tspm_capacity: int
    port: PortDirection = PortDirection.BUS
    run_state: RunState = RunState.IDLE
    reset_active: bool = True
    return_value_count: int = 0
    busy_cycles: int = 0
    last_finish: int = -1
    current: Any = None  # in-flight task record owned by the cluster scheduler


@dataclass
class ClusterState:
    cluster_id: int
    tiles: list[TileState]
    sections: dict[str, SpmSection]
    dma: DmaEngine
    max_threads: int
    active_threads: set[int] = field(default_factory=set)

    def section(self, name: str) -> SpmSection:
        return self.sections[name]

    def idle_tiles(self) -> list[TileState]:
        return [t for t in self.tiles if t.run_state is RunState.IDLE]


@dataclass
class MachineConfig:
    clusters: int = 1
    tile_mix: tuple[str, ...] = ("L", "L", "S", "S")
    tspm_bytes: int = 131072
    section_bytes: dict[str, int] = field(default_factory=lambda: {
        "TASK_CODE_POOL": 393216,
        "FIFO_LISTS": 65536,
        "LOAD_INDICATION": 16384,
        "COMPUTE_DATA": 1048576,
    })
    dma: DmaTiming = DmaTiming()
    max_threads: int = 2
    clock_hz: float = 500e6
    thread_eval_cycles: int = 50
    scan_visit_cycles: int = 10
    sched_tick_cycles: int = 1000
    strict: bool = True

    def __post_init__(self):
        if self.clusters < 1:
            raise ValueError("need at least one cluster")
        if not self.tile_mix:
            raise ValueError("tile mix must not be empty")
        for cls in self.tile_mix:
            if cls not in TILE_CLASS_TIMING:
                raise ValueError(f"unknown tile class {cls!r}")
        for name in SECTION_NAMES:
            if self.section_bytes.get(name, 0) <= 0:
                raise ValueError(f"section {name} must have positive capacity")


class Machine:
    """Clusters, tiles, DMA engines and the protocol-level state transitions."""

    def __init__(self, config: MachineConfig, trace_path: str | None = None,
                 digest_salt: str = ""):
        self.config = config
        self.engine = EventEngine(trace_path, salt=digest_salt)
        self.clusters: list[ClusterState] = []
        self.violations = 0
        next_tile = 0
        for cid in range(config.clusters):
            tiles = []
            for cls in config.tile_mix:
                tiles.append(TileState(
                    tile_id=next_tile, cluster_id=cid, tile_class=cls,
                    timing=TILE_CLASS_TIMING[cls], tspm_capacity=config.tspm_bytes))
                next_tile += 1
            sections = {name: SpmSection(f"c{cid}.{name}", config.section_bytes[name])
                        for name in SECTION_NAMES}
            self.clusters.append(ClusterState(
                cluster_id=cid, tiles=tiles, sections=sections,
                dma=DmaEngine(f"c{cid}.dma", config.dma),
                max_threads=config.max_threads))
        self.main_dma = DmaEngine("main.dma", config.dma)
        self.tiles = {t.tile_id: t for c in self.clusters for t in c.tiles}

    # -- protocol primitives ------------------------------------------------

    def _violate(self, message: str) -> None:
        self.violations += 1
        if self.config.strict:
            raise ProtocolViolation(message)

    def set_port_direction(self, tile: TileState, direction: PortDirection) -> int:
        """Atomic CSR write flipping scratchpad ownership; returns its cost."""
        if tile.run_state is RunState.RUNNING:
            self._violate(f"tile {tile.tile_id}: port flip while running")
        tile.port = direction
        return self.config.dma.csr_write_cycles

    def begin_deploy(self, cluster: ClusterState, tile: TileState,
                     code_bytes: int, data_bytes: int, now: int,
                     ctx: Any, thread: int = -1, task: str = "") -> Event:
        """Port->BUS, program the cluster DMA, and post its completion.

        The remaining two CSR writes (port->CORE, reset release) are applied
        by ``finish_deploy`` when the burst completes.
        """
        if tile.run_state is not RunState.IDLE:
            raise ProtocolViolation(f"tile {tile.tile_id}: deploy while busy")
        total = code_bytes + data_bytes
        if total > tile.tspm_capacity:
            raise AllocationFailure(
                f"tile {tile.tile_id}: payload {total} exceeds scratchpad")
        csr = self.set_port_direction(tile, PortDirection.BUS)
        tile.run_state = RunState.LOADING
        _, done = cluster.dma.reserve(now + csr, total)
        return self.engine.post(Event(
            time=done, kind=EventKind.DMA_DONE, cluster=cluster.cluster_id,
            tile=tile.tile_id, thread=thread, task=task, nbytes=total, ctx=ctx))

    def finish_deploy(self, tile: TileState) -> int:
        """Flip the port to the core and release reset; returns start time."""
        if tile.run_state is not RunState.LOADING:
            self._violate(f"tile {tile.tile_id}: deploy completion in {tile.run_state}")
        if tile.port is not PortDirection.BUS:
            self._violate(f"tile {tile.tile_id}: DMA finished with port at core")
        csr = self.set_port_direction(tile, PortDirection.CORE)
        tile.reset_active = False
        tile.run_state = RunState.RUNNING
        return self.engine.now + csr + self.config.dma.csr_write_cycles

    def tile_finish(self, tile: TileState, return_count: int) -> int:
        """Record return values, flip port to bus; returns the interrupt time."""
        if tile.run_state is not RunState.RUNNING:
            self._violate(f"tile {tile.tile_id}: finish while {tile.run_state}")
        if tile.port is not PortDirection.CORE:
            self._violate(f"tile {tile.tile_id}: ran with port at bus")
        tile.return_value_count = return_count
        tile.run_state = RunState.RETURNING
        tile.reset_active = True
        tile.port = PortDirection.BUS
        return self.engine.now + self.config.dma.csr_write_cycles

    def begin_retrieval(self, cluster: ClusterState, tile: TileState,
                        nbytes: int, now: int, ctx: Any,
                        thread: int = -1, task: str = "") -> Event:
        if tile.run_state is not RunState.RETURNING:
            self._violate(f"tile {tile.tile_id}: retrieval while {tile.run_state}")
        if tile.port is not PortDirection.BUS:
            self._violate(f"tile {tile.tile_id}: retrieval with port at core")
        _, done = cluster.dma.reserve(now, nbytes)
        return self.engine.post(Event(
            time=done, kind=EventKind.DMA_DONE, cluster=cluster.cluster_id,
            tile=tile.tile_id, thread=thread, task=task, nbytes=nbytes, ctx=ctx))

    def release_tile(self, tile: TileState, now: int) -> None:
        tile.run_state = RunState.IDLE
        tile.last_finish = now
        tile.current = None

    def main_transfer(self, now: int, nbytes: int, cluster_id: int,
                      thread: int, ctx: Any) -> Event:
        """Main-memory to cluster scratchpad burst (single CSR program)."""
        _, done = self.main_dma.reserve(now + self.config.dma.csr_write_cycles, nbytes)
        return self.engine.post(Event(
            time=done, kind=EventKind.DMA_DONE, cluster=cluster_id,
            thread=thread, nbytes=nbytes, ctx=ctx))

    def check_invariants(self) -> None:
        for cluster in self.clusters:
            for section in cluster.sections.values():
                section.check()
            if len(cluster.active_threads) > cluster.max_threads:
                raise RuntimeError(f"cluster {cluster.cluster_id} over thread limit")
            for tile in cluster.tiles:
                if tile.run_state is RunState.RUNNING and tile.port is not PortDirection.CORE:
                    raise RuntimeError(f"tile {tile.tile_id} running with port at bus")
                if tile.run_state in (RunState.LOADING, RunState.RETURNING) \
                        and tile.port is not PortDirection.BUS:
                    raise RuntimeError(f"tile {tile.tile_id} transferring with port at core")
