"""Worst-case dataflow graphs: attribute-tagged tasks, software FIFOs,
and runtime dismissal of conditional task groups.

A ``Dag`` is a mutable builder until ``freeze()`` validates it and computes a
structural content hash; after that it is immutable and safe to share. Each
running thread owns a ``DagInstance`` carrying per-task state and per-edge
FIFO queues.
"""

from __future__ import annotations

import enum
import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable

EXTERNAL = "EXTERNAL"

ATTRIBUTES = ("LARGE", "SMALL", "ANY")


class TaskState(enum.Enum):
    WAITING = "waiting"
    READY = "ready"
    DISPATCHED = "dispatched"
    RUNNING = "running"
    DONE = "done"
    DISMISSED = "dismissed"


# Legal forward transitions; dismissal is allowed from any pre-dispatch state.
_TRANSITIONS = {
    TaskState.WAITING: {TaskState.READY, TaskState.DISMISSED},
    TaskState.READY: {TaskState.DISPATCHED, TaskState.DISMISSED},
    TaskState.DISPATCHED: {TaskState.RUNNING},
    TaskState.RUNNING: {TaskState.DONE},
    TaskState.DONE: set(),
    TaskState.DISMISSED: set(),
}


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kernel: str
    attribute: str = "ANY"
    code_bytes: int = 4096
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.attribute not in ATTRIBUTES:
            raise ValueError(f"attribute must be one of {ATTRIBUTES}")
        if self.code_bytes <= 0:
            raise ValueError("code_bytes must be positive")


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    capacity: int = 4

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("FIFO capacity must be >= 1")


@dataclass(frozen=True)
class DismissalRule:
    producer: str
    group: tuple[str, ...]

    @property
    def max_count(self) -> int:
        return len(self.group)


@dataclass(frozen=True)
class Token:
    payload: Any
    byte_size: int
    region: int | None = None  # owning COMPUTE_DATA region while queued

    def __post_init__(self):
        if self.byte_size <= 0:
            raise ValueError("token byte size must be positive")


class Dag:
    """Builder plus frozen template for one processing chain."""

    def __init__(self):
        self.tasks: dict[str, TaskSpec] = {}
        self.edges: list[Edge] = []
        self.rules: list[DismissalRule] = []
        self._frozen_id: str | None = None

    # -- construction -----------------------------------------------------

    def _mutable(self):
        if self._frozen_id is not None:
            raise RuntimeError("dag is frozen")

    def add_task(self, spec: TaskSpec) -> str:
        self._mutable()
        if spec.task_id in self.tasks or spec.task_id == EXTERNAL:
            raise ValueError(f"duplicate or reserved task id {spec.task_id!r}")
        self.tasks[spec.task_id] = spec
        return spec.task_id

    def add_edge(self, src: str, dst: str, capacity: int = 4) -> int:
        self._mutable()
        for end in (src, dst):
            if end != EXTERNAL and end not in self.tasks:
                raise ValueError(f"unknown edge endpoint {end!r}")
        self.edges.append(Edge(src=src, dst=dst, capacity=capacity))
        return len(self.edges) - 1

    def add_dismissal(self, producer: str, group: Iterable[str]) -> None:
        self._mutable()
        self.rules.append(DismissalRule(producer=producer, group=tuple(group)))

    # -- validation and identity ------------------------------------------

    def validate(self) -> list[str]:
        problems = []
        indeg = {tid: 0 for tid in self.tasks}
        succ: dict[str, list[str]] = {tid: [] for tid in self.tasks}
        for edge in self.edges:
            if edge.src == edge.dst:
                problems.append(f"self-loop on {edge.src}")
                continue
            if edge.dst != EXTERNAL and edge.src != EXTERNAL:
                indeg[edge.dst] += 1
                succ[edge.src].append(edge.dst)
            elif edge.dst != EXTERNAL:
                indeg[edge.dst] += 1
        for tid, deg in indeg.items():
            if deg == 0:
                problems.append(f"task {tid} has no input edge")
        # Kahn's algorithm; leftovers mean a cycle.
        internal_indeg = {tid: 0 for tid in self.tasks}
        for edge in self.edges:
            if edge.src in self.tasks and edge.dst in self.tasks:
                internal_indeg[edge.dst] += 1
        frontier = sorted(t for t, d in internal_indeg.items() if d == 0)
        seen = 0
        work = dict(internal_indeg)
        queue = deque(frontier)
        while queue:
            tid = queue.popleft()
            seen += 1
            for nxt in sorted(succ[tid]):
                work[nxt] -= 1
                if work[nxt] == 0:
                    queue.append(nxt)
        if seen != len(self.tasks):
            problems.append("graph contains a cycle")
        for rule in self.rules:
            if rule.producer not in self.tasks:
                problems.append(f"dismissal producer {rule.producer} unknown")
                continue
            if len(set(rule.group)) != len(rule.group):
                problems.append(f"dismissal group of {rule.producer} has duplicates")
            reachable = self._reachable_from(rule.producer)
            for member in rule.group:
                if member not in self.tasks:
                    problems.append(f"dismissal member {member} unknown")
                elif member == rule.producer:
                    problems.append(f"dismissal group of {rule.producer} contains producer")
                elif member not in reachable:
                    problems.append(f"{rule.producer} does not reach group member {member}")
        return problems

    def _reachable_from(self, start: str) -> set[str]:
        succ: dict[str, list[str]] = {tid: [] for tid in self.tasks}
        for edge in self.edges:
            if edge.src in self.tasks and edge.dst in self.tasks:
                succ[edge.src].append(edge.dst)
        out: set[str] = set()
        stack = [start]
        while stack:
            tid = stack.pop()
            for nxt in succ[tid]:
                if nxt not in out:
                    out.add(nxt)
                    stack.append(nxt)
        return out

    def freeze(self) -> "Dag":
        problems = self.validate()
        if problems:
            raise ValueError("invalid dag: " + "; ".join(problems))
        self._frozen_id = self._content_hash()
        self._topo = self._topological_order()
        self._in_edges = {tid: [] for tid in self.tasks}
        self._out_edges = {tid: [] for tid in self.tasks}
        for idx, edge in enumerate(self.edges):
            if edge.dst in self.tasks:
                self._in_edges[edge.dst].append(idx)
            if edge.src in self.tasks:
                self._out_edges[edge.src].append(idx)
        self._rule_by_producer = {rule.producer: rule for rule in self.rules}
        return self

    def _content_hash(self) -> str:
        canon = {
            "tasks": sorted(
                (t.task_id, t.kernel, t.attribute, t.code_bytes,
                 sorted(t.params.items()))
                for t in self.tasks.values()
            ),
            "edges": sorted((e.src, e.dst, e.capacity) for e in self.edges),
            "rules": sorted((r.producer, r.group) for r in self.rules),
        }
        blob = json.dumps(canon, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def _topological_order(self) -> list[str]:
        indeg = {tid: 0 for tid in self.tasks}
        succ: dict[str, list[str]] = {tid: [] for tid in self.tasks}
        for edge in self.edges:
            if edge.src in self.tasks and edge.dst in self.tasks:
                indeg[edge.dst] += 1
                succ[edge.src].append(edge.dst)
        queue = deque(sorted(t for t, d in indeg.items() if d == 0))
        order = []
        while queue:
            tid = queue.popleft()
            order.append(tid)
            ready = []
            for nxt in succ[tid]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    ready.append(nxt)
            for nxt in sorted(ready):
                queue.append(nxt)
        return order

    # -- frozen accessors ---------------------------------------------------

    @property
    def dag_id(self) -> str:
        if self._frozen_id is None:
            raise RuntimeError("dag_id is only defined after freeze()")
        return self._frozen_id

    @property
    def topo_order(self) -> list[str]:
        return list(self._topo)

    def in_edges(self, task_id: str) -> list[int]:
        return list(self._in_edges[task_id])

    def out_edges(self, task_id: str) -> list[int]:
        return list(self._out_edges[task_id])

    def dismissal_rule(self, producer: str) -> DismissalRule | None:
        return self._rule_by_producer.get(producer)

    @property
    def total_code_bytes(self) -> int:
        return sum(t.code_bytes for t in self.tasks.values())

    def external_input_edges(self) -> list[int]:
        return [i for i, e in enumerate(self.edges) if e.src == EXTERNAL]


class BackpressureError(RuntimeError):
    """FIFO at capacity; the caller should retry later."""


class DagInstance:
    """Runtime state of one thread's dag: task states and FIFO contents."""

    def __init__(self, dag: Dag):
        dag.dag_id  # require frozen
        self.dag = dag
        self.states = {tid: TaskState.WAITING for tid in dag.tasks}
        self.fifos: dict[int, deque[Token]] = {i: deque() for i in range(len(dag.edges))}
        self.push_counts = {i: 0 for i in range(len(dag.edges))}
        self.pop_counts = {i: 0 for i in range(len(dag.edges))}
        self.outputs: dict[str, list[Token]] = {}
        self.returns: dict[str, Any] = {}

    def set_state(self, task_id: str, new: TaskState) -> None:
        cur = self.states[task_id]
        if new not in _TRANSITIONS[cur]:
            raise RuntimeError(f"illegal transition {cur.value} -> {new.value} for {task_id}")
        self.states[task_id] = new

    def live_in_edges(self, task_id: str) -> list[int]:
        """Input edges whose producer was not dismissed (arity adjustment)."""
        out = []
        for idx in self.dag.in_edges(task_id):
            src = self.dag.edges[idx].src
            if src in self.states and self.states[src] is TaskState.DISMISSED:
                continue
            out.append(idx)
        return out

    def is_ready(self, task_id: str) -> bool:
        if self.states[task_id] not in (TaskState.WAITING, TaskState.READY):
            return False
        return all(self.fifos[idx] for idx in self.live_in_edges(task_id))

    def ready_tasks(self) -> set[str]:
        return {tid for tid in self.dag.tasks if self.is_ready(tid)}

    def push_token(self, edge_idx: int, token: Token) -> None:
        fifo = self.fifos[edge_idx]
        if len(fifo) >= self.dag.edges[edge_idx].capacity:
            raise BackpressureError(f"edge {edge_idx} at capacity")
        fifo.append(token)
        self.push_counts[edge_idx] += 1

    def pop_inputs(self, task_id: str) -> list[Token]:
        if not self.is_ready(task_id):
            raise RuntimeError(f"pop_inputs on non-ready task {task_id}")
        tokens = []
        for idx in self.live_in_edges(task_id):
            tokens.append(self.fifos[idx].popleft())
            self.pop_counts[idx] += 1
        return tokens

    def apply_dismissal(self, rule: DismissalRule, observed_count: int) -> list[str]:
        """Dismiss the tail of the rule's group beyond the observed count."""
        if not 0 <= observed_count <= rule.max_count:
            raise ValueError(f"observed count must be in 0..{rule.max_count}")
        if self.states[rule.producer] is not TaskState.DONE:
            raise RuntimeError("dismissal producer has not completed")
        dismissed = []
        for member in rule.group[observed_count:]:
            if self.states[member] in (TaskState.DISPATCHED, TaskState.RUNNING,
                                       TaskState.DONE):
                raise RuntimeError(f"group member {member} already dispatched")
            if self.states[member] is not TaskState.DISMISSED:
                self.set_state(member, TaskState.DISMISSED)
                dismissed.append(member)
        return dismissed

    def is_complete(self) -> bool:
        return all(s in (TaskState.DONE, TaskState.DISMISSED)
                   for s in self.states.values())


# ---------------------------------------------------------------------------
# plain-text dag description format


def dump_dag(dag: Dag) -> str:
    """Render `task`, `edge` and `dismiss` records, one per line."""
    lines = []
    for spec in dag.tasks.values():
        lines.append(f"task {spec.task_id} {spec.kernel} {spec.attribute} {spec.code_bytes}")
    for edge in dag.edges:
        lines.append(f"edge {edge.src} {edge.dst} {edge.capacity}")
    for rule in dag.rules:
        lines.append(f"dismiss {rule.producer} {rule.max_count} " + " ".join(rule.group))
    return "\n".join(lines) + "\n"


def load_dag(text: str) -> Dag:
    dag = Dag()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "task":
                tid, kernel, attr, code_bytes = parts[1:5]
                dag.add_task(TaskSpec(task_id=tid, kernel=kernel, attribute=attr,
                                      code_bytes=int(code_bytes)))
            elif kind == "edge":
                src, dst, cap = parts[1:4]
                dag.add_edge(src, dst, int(cap))
            elif kind == "dismiss":
                producer, count = parts[1], int(parts[2])
                group = parts[3:]
                if len(group) != count:
                    raise ValueError(f"dismiss group size {len(group)} != {count}")
                dag.add_dismissal(producer, group)
            else:
                raise ValueError(f"unknown record kind {kind!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"dag description line {lineno}: {exc}") from None
    return dag
