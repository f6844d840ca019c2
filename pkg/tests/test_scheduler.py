"""Scheduler contract: FIFO order, priority order, claim-once, pluggability."""

import random

import pytest

import seqflow as sf
from seqflow.scheduler import (
    DEVICE,
    HOST,
    FifoScheduler,
    PriorityScheduler,
    Scheduler,
    WorkerKind,
    make_scheduler,
)
from seqflow.task import Task


def queued_task(callables=None, priority=0):
    t = Task(None, callables or {HOST: lambda: None}, priority=priority)
    t.dec_pending()
    assert t.mark_queued()
    return t


HOST_KIND = WorkerKind.host()
DEV_KIND = WorkerKind.device_worker(0)


def test_fifo_pop_order():
    sched = FifoScheduler()
    tasks = [queued_task() for _ in range(5)]
    for t in tasks:
        sched.push(t)
    assert sched.ready_count() == 5
    popped = [sched.pop(HOST_KIND) for _ in range(5)]
    assert popped == tasks
    assert sched.pop(HOST_KIND) is None
    assert sched.ready_count() == 0


def test_pop_respects_worker_kind():
    sched = FifoScheduler()
    host_only = queued_task({HOST: lambda: None})
    dev_only = queued_task({DEVICE: lambda: None})
    sched.push(host_only)
    sched.push(dev_only)
    assert sched.pop(DEV_KIND) is dev_only
    assert sched.pop(HOST_KIND) is host_only


def test_dual_callable_claimed_once():
    sched = FifoScheduler()
    both = queued_task({HOST: lambda: None, DEVICE: lambda: None})
    sched.push(both)
    assert sched.pop(HOST_KIND) is both
    # the device queue's twin entry is stale and must be skipped
    assert sched.pop(DEV_KIND) is None
    assert sched.ready_count() == 0


def test_priority_pops_non_increasing():
    rng = random.Random(7)
    for _ in range(100):
        sched = PriorityScheduler()
        tasks = [queued_task(priority=rng.randint(-50, 50))
                 for _ in range(rng.randint(1, 40))]
        for t in tasks:
            sched.push(t)
        seen = []
        while True:
            t = sched.pop(HOST_KIND)
            if t is None:
                break
            seen.append(t.priority)
        assert len(seen) == len(tasks)
        assert all(a >= b for a, b in zip(seen, seen[1:]))


def test_priority_ties_keep_push_order():
    sched = PriorityScheduler()
    tasks = [queued_task(priority=3) for _ in range(4)]
    for t in tasks:
        sched.push(t)
    assert [sched.pop(HOST_KIND) for _ in range(4)] == tasks


def test_make_scheduler_variants():
    assert isinstance(make_scheduler(None), FifoScheduler)
    assert isinstance(make_scheduler("fifo"), FifoScheduler)
    assert isinstance(make_scheduler("prio"), PriorityScheduler)
    assert isinstance(make_scheduler(PriorityScheduler), PriorityScheduler)
    inst = FifoScheduler()
    assert make_scheduler(inst) is inst
    with pytest.raises(sf.ConfigurationError):
        make_scheduler("zigzag")
    with pytest.raises(sf.ConfigurationError):
        make_scheduler(42)


class ReversingScheduler(Scheduler):
    """LIFO: pops the most recently pushed runnable task."""

    def __init__(self):
        import threading

        self._lock = threading.Lock()
        self._stacks = {HOST: [], DEVICE: []}
        self._count = 0

    def push(self, task):
        with self._lock:
            for cls in (HOST, DEVICE):
                if cls in task.callables:
                    self._stacks[cls].append(task)
            self._count += 1

    def pop(self, kind):
        stack = self._stacks[kind.kind]
        with self._lock:
            while stack:
                task = stack.pop()
                if task.unmark_queued():
                    self._count -= 1
                    return task
            return None

    def ready_count(self):
        with self._lock:
            return self._count


def test_user_scheduler_runs_a_graph():
    eng = sf.create_engine(sf.WorkerTeam.of_host_workers(2),
                           scheduler=ReversingScheduler())
    try:
        g = sf.TaskGraph().compute_on(eng)
        acc = sf.Cell(0)
        for i in range(20):
            g.task(sf.commutative_write(acc),
                   host=lambda c, k=i: setattr(c, "value", c.value + k))
        g.wait_all()
        assert acc.value == sum(range(20))
    finally:
        eng.stop()
