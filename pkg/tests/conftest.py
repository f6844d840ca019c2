"""Shared fixtures and the randomized-program machinery used across the suite.

A "program" is a list of small integer-arithmetic tasks over a handful of
cells, drawn over all five access modes.  Its meaning is defined by
``sequential_oracle``, which executes the same formulas one task at a time in
insertion order; parallel runs must reproduce that state exactly.  Commutative
and atomic contributions are additions, so any mutual order gives the same sum.
"""

from __future__ import annotations

import array
import random
import re
import threading

import pytest

import seqflow as sf

WORKER_COUNTS = (1, 2, 4, 8)
MOD = 10_000_019

# mode weights: writers dominate so graphs stay interestingly serialized
_MODE_POOL = (
    "read", "read",
    "write", "write", "write",
    "atomic", "atomic",
    "commute", "commute",
    "maybe",
)


class ProgramTask:
    __slots__ = ("mode", "target", "reads", "a", "b")

    def __init__(self, mode, target, reads, a, b):
        self.mode = mode
        self.target = target
        self.reads = reads
        self.a = a
        self.b = b

    def __repr__(self):
        return (f"ProgramTask({self.mode}, t={self.target}, r={self.reads}, "
                f"a={self.a}, b={self.b})")


def random_program(rng: random.Random, max_tasks: int = 64, max_cells: int = 16):
    n_cells = rng.randint(2, max_cells)
    n_tasks = rng.randint(1, max_tasks)
    tasks = []
    for _ in range(n_tasks):
        mode = rng.choice(_MODE_POOL)
        target = rng.randrange(n_cells)
        others = [i for i in range(n_cells) if i != target]
        reads = rng.sample(others, min(rng.randint(0, 3), len(others)))
        tasks.append(ProgramTask(mode, target, reads, rng.randint(1, 3),
                                 rng.randint(-5, 5)))
    return n_cells, tasks


def initial_values(n_cells: int) -> list:
    return [i + 1 for i in range(n_cells)]


def sequential_oracle(n_cells: int, tasks) -> list:
    """Reference semantics: one task at a time, insertion order."""
    vals = initial_values(n_cells)
    for pt in tasks:
        rsum = sum(vals[r] for r in pt.reads)
        if pt.mode == "read":
            pass
        elif pt.mode in ("write", "maybe"):
            if pt.mode == "maybe" and vals[pt.target] % 2 != 0:
                continue
            vals[pt.target] = (pt.a * vals[pt.target] + pt.b + rsum) % MOD
        elif pt.mode == "atomic":
            vals[pt.target] = (vals[pt.target] + pt.b + rsum) % MOD
        elif pt.mode == "commute":
            vals[pt.target] = (vals[pt.target] + pt.b + pt.a * rsum) % MOD
        else:
            raise AssertionError(pt.mode)
    return vals


def build_accesses_and_body(pt: ProgramTask, cells, atomic_lock):
    target = cells[pt.target]
    readers = [cells[r] for r in pt.reads]
    read_specs = [sf.read(c) for c in readers]
    a, b = pt.a, pt.b

    if pt.mode == "read":
        def body(t, *rs):
            _ = (t.value + sum(r.value for r in rs)) % MOD
        return [sf.read(target), *read_specs], body

    if pt.mode == "write":
        def body(t, *rs):
            t.value = (a * t.value + b + sum(r.value for r in rs)) % MOD
        return [sf.write(target), *read_specs], body

    if pt.mode == "maybe":
        def body(t, *rs):
            if t.value % 2 == 0:
                t.value = (a * t.value + b + sum(r.value for r in rs)) % MOD
                return True
            return False
        return [sf.maybe_write(target), *read_specs], body

    if pt.mode == "atomic":
        # members of one atomic slot run concurrently; the lock is ours to bring
        def body(t, *rs):
            contrib = (b + sum(r.value for r in rs)) % MOD
            with atomic_lock:
                t.value = (t.value + contrib) % MOD
        return [sf.atomic_write(target), *read_specs], body

    if pt.mode == "commute":
        def body(t, *rs):
            t.value = (t.value + b + a * sum(r.value for r in rs)) % MOD
        return [sf.commutative_write(target), *read_specs], body

    raise AssertionError(pt.mode)


def run_program(engine, n_cells, tasks, trace=False):
    """Insert the program on a fresh graph over ``engine``; returns final state."""
    graph = sf.TaskGraph(trace=trace).compute_on(engine)
    cells = [sf.Cell(v) for v in initial_values(n_cells)]
    lock = threading.Lock()
    viewers = []
    for pt in tasks:
        accesses, body = build_accesses_and_body(pt, cells, lock)
        viewers.append(graph.task(*accesses, host=body))
    graph.wait_all()
    return [c.value for c in cells], graph, viewers


ACCEPTANCE_LINES = []


def acceptance_line(number: int, title: str, ok: bool) -> None:
    """Record and print one acceptance verdict; the summary hook repeats it."""
    line = f"[acceptance] criterion {number} ({title}): {'PASS' if ok else 'FAIL'}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


_CATEGORY = {"read": "R", "atomic": "A", "commute": "C", "write": "X", "maybe": "X"}


def static_successor_edges(n_cells: int, tasks) -> set:
    """Expected dot edges, as task-index pairs, from first principles.

    Replays the grouping rule on paper: per cell, append to the latest group
    while the category matches (exclusive accesses never group), then link
    every member of each group to every member of the next one.
    """
    groups_by_cell = {c: [] for c in range(n_cells)}
    for idx, pt in enumerate(tasks):
        specs = [(pt.target, _CATEGORY[pt.mode])]
        specs += [(r, "R") for r in pt.reads]
        for cell, cat in specs:
            groups = groups_by_cell[cell]
            if groups and groups[-1][0] == cat and cat != "X":
                groups[-1][1].append(idx)
            else:
                groups.append((cat, [idx]))
    edges = set()
    for groups in groups_by_cell.values():
        for (_, src), (_, dst) in zip(groups, groups[1:]):
            edges.update((i, j) for i in src for j in dst)
    return edges


def run_gated_program(engine, n_cells, tasks, timeout=60):
    """Insert a program while a gate task occupies the only worker.

    Execution cannot interleave with insertion, so the final slot layout is
    exactly what static grouping predicts.  Requires a 1-worker engine.
    Returns (graph, tids) with tids in insertion order, gate excluded.
    """
    graph = sf.TaskGraph().compute_on(engine)
    gate = threading.Event()
    graph.task(sf.read(sf.Cell(0)), host=lambda c: gate.wait(timeout), name="gate")
    cells = [sf.Cell(v) for v in initial_values(n_cells)]
    lock = threading.Lock()
    tids = []
    for pt in tasks:
        accesses, body = build_accesses_and_body(pt, cells, lock)
        tids.append(graph.task(*accesses, host=body).task_id)
    gate.set()
    if not graph.wait_all(timeout=timeout):
        raise AssertionError("gated program did not finish")
    return graph, tids, [c.value for c in cells]


_DOT_NODE = re.compile(r"^  t(\d+) \[(.*)\];$")
_DOT_EDGE = re.compile(r"^  t(\d+) -> t(\d+)(?: \[label=(.*)\])?;$")


def parse_dot(text: str):
    """Parse the exporter's dot dialect back into (nodes, edges)."""
    lines = text.strip().splitlines()
    if lines[0] != "digraph taskgraph {" or lines[-1] != "}":
        raise AssertionError("not a taskgraph digraph")
    nodes, edges = {}, {}
    for line in lines[1:-1]:
        m = _DOT_NODE.match(line)
        if m:
            nodes[int(m.group(1))] = m.group(2)
            continue
        m = _DOT_EDGE.match(line)
        if m:
            edges[(int(m.group(1)), int(m.group(2)))] = m.group(3)
            continue
        raise AssertionError(f"unparseable dot line: {line!r}")
    return nodes, edges


class Matrix:
    """Row-major float matrix exercising the structured serialization tier."""

    def __init__(self, nb_rows=0, nb_cols=0, values=()):
        self.nb_rows = nb_rows
        self.nb_cols = nb_cols
        self.values = array.array("d", values)

    def serialize(self, serializer):
        serializer.append(self.nb_rows, "nbRows")
        serializer.append(self.nb_cols, "nbCols")
        serializer.append(self.values, "values")

    def deserialize(self, deserializer):
        self.nb_rows = deserializer.read_int("nbRows")
        self.nb_cols = deserializer.read_int("nbCols")
        self.values = array.array("d")
        self.values.frombytes(deserializer.read_bytes("values"))

    def __eq__(self, other):
        return (
            isinstance(other, Matrix)
            and self.nb_rows == other.nb_rows
            and self.nb_cols == other.nb_cols
            and self.values == other.values
        )


@pytest.fixture(scope="session")
def engines():
    """Persistent engines, one per acceptance worker count."""
    engs = {
        n: sf.create_engine(sf.WorkerTeam.of_host_workers(n))
        for n in WORKER_COUNTS
    }
    yield engs
    for eng in engs.values():
        eng.stop()


@pytest.fixture()
def engine4():
    eng = sf.create_engine(sf.WorkerTeam.of_host_workers(4))
    yield eng
    eng.stop()


@pytest.fixture()
def engine1():
    eng = sf.create_engine(sf.WorkerTeam.of_host_workers(1))
    yield eng
    eng.stop()
