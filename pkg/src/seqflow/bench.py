"""Overhead measurement protocol and demo scenarios for the CLI.

The overhead benchmark builds T independent sub-chains over T data objects,
inserts T x N sleeping tasks, and derives the runtime's per-task overhead O
from the makespan: with zero overhead the makespan would be exactly N x D, so
O = makespan / N - D.  Raw end timestamps are emitted so every reported number
can be recomputed from the artifacts.
"""

from __future__ import annotations

import csv
import json
import os
import statistics
import time

from .access import commutative_write, maybe_write, read, write
from .cell import Cell
from .engine import WorkerTeam, create_engine
from .errors import ConfigurationError
from .graph import TaskGraph

# below this remainder a plain sleep overshoots too much to trust
_SPIN_THRESHOLD_S = 200e-6
_SLEEP_MARGIN_S = 150e-6


def precise_sleep(duration: float) -> None:
    """Sleep close to ``duration``: coarse sleep first, busy-yield tail."""
    if duration <= 0:
        return
    deadline = time.perf_counter() + duration
    if duration > _SPIN_THRESHOLD_S:
        time.sleep(duration - _SLEEP_MARGIN_S)
    while time.perf_counter() < deadline:
        time.sleep(0)  # yield: a bare spin would hog the interpreter lock


class BenchConfig:
    """Validated overhead-run parameters."""

    def __init__(self, workers=4, tasks_per_chain=1000, duration=1e-3,
                 mode="write", deps=1, sched="fifo", reps=3, out=None):
        if workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if tasks_per_chain < 1:
            raise ConfigurationError("tasks-per-chain must be >= 1")
        if duration < 0:
            raise ConfigurationError("duration must be >= 0")
        if mode not in ("write", "commute"):
            raise ConfigurationError(f"mode must be write or commute, got {mode!r}")
        if not 1 <= deps <= 20:
            raise ConfigurationError("deps must be in 1..20")
        if reps < 1:
            raise ConfigurationError("reps must be >= 1")
        self.workers = workers
        self.tasks_per_chain = tasks_per_chain
        self.duration = duration
        self.mode = mode
        self.deps = deps
        self.sched = sched
        self.reps = reps
        self.out = out


def _one_rep(config: BenchConfig):
    T, N, D = config.workers, config.tasks_per_chain, config.duration
    mode_fn = write if config.mode == "write" else commutative_write
    with create_engine(WorkerTeam.of_host_workers(T), scheduler=config.sched) as engine:
        graph = TaskGraph(trace=False).compute_on(engine)
        chains = [Cell(0) for _ in range(T)]
        extras = [[Cell(0) for _ in range(config.deps - 1)] for _ in range(T)]
        ends = [[0] * N for _ in range(T)]

        def make_body(c: int, i: int):
            row = ends[c]

            def body(*_args):
                precise_sleep(D)
                row[i] = time.perf_counter_ns()

            return body

        t0 = time.perf_counter_ns()
        for i in range(N):
            for c in range(T):
                accesses = [mode_fn(chains[c])]
                accesses += [read(x) for x in extras[c]]
                graph.task(*accesses, host=make_body(c, i))
        insertion_ns = time.perf_counter_ns() - t0
        graph.wait_all()
    return t0, insertion_ns, ends


def derive_report(t0: int, insertion_ns: int, ends, duration: float) -> dict:
    """Per-rep numbers from raw timestamps; pure so tests can recompute it."""
    T = len(ends)
    N = len(ends[0])
    makespan_s = (max(max(row) for row in ends) - t0) / 1e9
    o_avg = makespan_s / N - duration
    o_max = None
    for row in ends:
        ordered = sorted(row)
        prev = t0
        for end in ordered:
            gap = (end - prev) / 1e9 - duration
            if o_max is None or gap > o_max:
                o_max = gap
            prev = end
    return {
        "insertion_s": insertion_ns / 1e9,
        "insertion_per_task_s": insertion_ns / 1e9 / (T * N),
        "makespan_s": makespan_s,
        "o_avg_s": o_avg,
        "o_max_s": o_max,
    }


_CSV_FIELDS = [
    "rep", "workers", "tasks_per_chain", "duration_s", "mode", "deps", "sched",
    "insertion_s", "insertion_per_task_s", "makespan_s", "o_avg_s", "o_max_s",
]


def run_overhead(config: BenchConfig, quiet: bool = False) -> dict:
    """Run the full protocol; returns the report and writes artifacts if asked."""
    rows = []
    raw = []
    for rep in range(config.reps):
        t0, insertion_ns, ends = _one_rep(config)
        derived = derive_report(t0, insertion_ns, ends, config.duration)
        row = {
            "rep": rep,
            "workers": config.workers,
            "tasks_per_chain": config.tasks_per_chain,
            "duration_s": config.duration,
            "mode": config.mode,
            "deps": config.deps,
            "sched": config.sched,
            **derived,
        }
        rows.append(row)
        raw.append({
            "rep": rep,
            "t0_ns": t0,
            "insertion_ns": insertion_ns,
            "ends_ns": ends,
        })
        if not quiet:
            print(
                f"[bench] rep {rep}: makespan {derived['makespan_s']:.6f} s  "
                f"O avg {derived['o_avg_s'] * 1e6:.2f} us  "
                f"O max {derived['o_max_s'] * 1e6:.2f} us  "
                f"insertion/task {derived['insertion_per_task_s'] * 1e6:.2f} us"
            )
    report = {
        "config": {
            "workers": config.workers,
            "tasks_per_chain": config.tasks_per_chain,
            "duration_s": config.duration,
            "mode": config.mode,
            "deps": config.deps,
            "sched": config.sched,
            "reps": config.reps,
        },
        "rows": rows,
        "o_avg_mean_s": statistics.fmean(r["o_avg_s"] for r in rows),
        "o_avg_median_s": statistics.median(r["o_avg_s"] for r in rows),
        "o_max_worst_s": max(r["o_max_s"] for r in rows),
        "insertion_per_task_mean_s": statistics.fmean(
            r["insertion_per_task_s"] for r in rows
        ),
    }
    if not quiet:
        print(
            f"[bench] {config.mode} T={config.workers} N={config.tasks_per_chain} "
            f"D={config.duration:g}: O avg {report['o_avg_mean_s'] * 1e6:.2f} us "
            f"(median {report['o_avg_median_s'] * 1e6:.2f} us), "
            f"O max {report['o_max_worst_s'] * 1e6:.2f} us"
        )
    if config.out is not None:
        os.makedirs(config.out, exist_ok=True)
        with open(os.path.join(config.out, "overhead.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
        with open(os.path.join(config.out, "overhead.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
        with open(os.path.join(config.out, "raw_timestamps.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(raw, fh)
    return report


# -- demos -------------------------------------------------------------------


def _export(graph: TaskGraph, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    graph.generate_dot(os.path.join(out_dir, "graph.dot"))
    graph.generate_trace_svg(os.path.join(out_dir, "trace.svg"))


def demo_daggraph(out_dir: str, workers: int = 4, sched="fifo") -> int:
    """Fan-out/fan-in DAG: one source, two middle layers, one sink."""
    with create_engine(WorkerTeam.of_host_workers(workers), scheduler=sched) as engine:
        graph = TaskGraph().compute_on(engine)
        src = Cell(1)
        mids = [Cell(0) for _ in range(4)]
        outs = [Cell(0) for _ in range(4)]
        total = Cell(0)

        def setter(k):
            def body(s, m):
                m.value = s.value * k

            return body

        def double(m, o):
            o.value = m.value * 2

        def add(o, t):
            t.value += o.value

        graph.task(write(src), host=lambda s: None, name="init")
        for k, mid in enumerate(mids):
            graph.task(read(src), write(mid), host=setter(k + 1), name=f"scale{k}")
        for mid, out in zip(mids, outs):
            graph.task(read(mid), write(out), host=double, name="double")
        for out in outs:
            graph.task(read(out), commutative_write(total), host=add, name="gather")
        graph.wait_all()
        _export(graph, out_dir)
    expected = sum((k + 1) * 2 for k in range(4))
    ok = total.value == expected
    print(f"[daggraph] total {total.value} (expected {expected}): "
          f"{'ok' if ok else 'MISMATCH'}")
    return 0 if ok else 1


def demo_device_roundtrip(out_dir: str, workers: int = 2, devices: int = 1,
                          device_mem: int = 16 << 20, sched="fifo") -> int:
    """Host writes, a device kernel transforms, host checks after a flush."""
    buf = bytearray(64)
    oracle = bytearray((3 * i + 7) % 256 for i in range(64))
    team = WorkerTeam.of_host_and_device_workers(devices=devices, host_workers=workers)
    with create_engine(team, scheduler=sched, device_memory=device_mem) as engine:
        graph = TaskGraph().compute_on(engine)

        def fill(b):
            for i in range(len(b)):
                b[i] = (3 * i) % 256

        def kernel(view):
            data = view.data
            for i in range(len(data)):
                data[i] = (data[i] + 7) % 256

        graph.task(write(buf), host=fill, name="fill")
        graph.task(write(buf), device=kernel, name="shift")
        graph.flush_to_host(buf)
        graph.wait_all()
        _export(graph, out_dir)
        moved = sum(
            d.mover.bytes_to_device + d.mover.bytes_from_device
            for d in engine.realm.domains.values()
        )
    ok = buf == oracle
    print(f"[device-roundtrip] {moved} bytes moved, result "
          f"{'matches host-only oracle' if ok else 'MISMATCH'}")
    return 0 if ok else 1


def demo_comm_pingpong(out_dir: str, ranks: int = 2, workers: int = 2,
                       sched="fifo") -> int:
    """Cell ping-pong between rank 0 and rank 1, plus a broadcast."""
    from .comms import InProcessUniverse

    if ranks < 2:
        print("[comm-pingpong] needs --ranks >= 2")
        return 1
    rounds = 4
    with InProcessUniverse(ranks) as universe:
        engines = [
            create_engine(WorkerTeam.of_host_workers(workers), scheduler=sched)
            for _ in range(ranks)
        ]
        try:
            graphs = []
            for rank in range(ranks):
                g = TaskGraph().compute_on(engines[rank])
                g.use_comm(universe.instance(rank))
                graphs.append(g)
            ping = Cell(100)
            pong = Cell(0)
            for r in range(rounds):
                graphs[0].send(ping, dest=1, tag=r)
                graphs[1].recv(pong, src=0, tag=r)
                graphs[1].task(write(pong), host=lambda c: setattr(
                    c, "value", c.value + 1))
                graphs[1].send(pong, dest=0, tag=100 + r)
                graphs[0].recv(ping, src=1, tag=100 + r)
            stamp = Cell(777)
            blanks = [Cell(0) for _ in range(ranks)]
            for rank, g in enumerate(graphs):
                g.broadcast(stamp if rank == 0 else blanks[rank], root=0)
            for g in graphs:
                g.wait_all()
            _export(graphs[0], out_dir)
            graphs[1].generate_dot(os.path.join(out_dir, "graph-rank1.dot"))
        finally:
            for engine in engines:
                engine.stop()
    expected = 100 + rounds
    bcast_ok = all(b.value == 777 for b in blanks[1:])
    ok = ping.value == expected and pong.value == expected and bcast_ok
    print(f"[comm-pingpong] rank0 sees {ping.value}, rank1 sees {pong.value} "
          f"(expected {expected}), broadcast "
          f"{'ok' if bcast_ok else 'MISMATCH'}: {'ok' if ok else 'MISMATCH'}")
    return 0 if ok else 1


def demo_speculation_coin(out_dir: str, workers: int = 4, sched="fifo",
                          seed=None) -> int:
    """A coin decides whether the uncertain task writes; successors speculate."""
    import random

    rng = random.Random(seed)
    flip = rng.random() < 0.5

    def run(speculation: bool):
        with create_engine(WorkerTeam.of_host_workers(workers),
                           scheduler=sched) as engine:
            graph = TaskGraph(speculation=speculation).compute_on(engine)
            x = Cell(10)
            y = Cell(0)
            z = Cell(0)

            def coin(c):
                precise_sleep(0.02)  # make the speculation window visible
                if flip:
                    c.value += 5
                    return True
                return False

            def use(a, b):
                precise_sleep(0.01)
                b.value = a.value * 3

            def after(b, c):
                c.value = b.value + 1

            graph.task(maybe_write(x), host=coin, name="coin")
            graph.task(read(x), write(y), host=use, name="use")
            graph.task(read(y), write(z), host=after, name="after")
            graph.wait_all()
            if speculation:
                _export(graph, out_dir)
            return x.value, y.value, z.value

    oracle = run(speculation=False)
    got = run(speculation=True)
    path = "commit (the maybe-write happened)" if flip else \
        "rollback-free (the duplicate's results were kept)"
    ok = got == oracle
    print(f"[speculation-coin] path: {path}; state {got} vs sequential "
          f"{oracle}: {'ok' if ok else 'MISMATCH'}")
    return 0 if ok else 1


DEMOS = {
    "daggraph": demo_daggraph,
    "device-roundtrip": demo_device_roundtrip,
    "comm-pingpong": demo_comm_pingpong,
    "speculation-coin": demo_speculation_coin,
}


def run_demo(name: str, out_dir: str, **kwargs) -> int:
    fn = DEMOS.get(name)
    if fn is None:
        raise ConfigurationError(
            f"unknown demo {name!r}; expected one of {sorted(DEMOS)}"
        )
    return fn(out_dir, **kwargs)
