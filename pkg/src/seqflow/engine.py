"""Compute engines: worker threads pulling tasks from a shared scheduler.

An engine owns a team of workers (host workers plus one or more per simulated
device), a scheduler, and the device arenas.  Graphs attach to exactly one
engine; an engine may serve several graphs.  Workers park on a condition when
the scheduler has nothing for them; every state change that could make work
available bumps a version counter before notifying, so a worker that observed
the old version never sleeps through a wakeup.

Worker threads take engine/scheduler locks only at the bottom of the lock
order: nothing holds a handle or task lock while acquiring them.
"""

from __future__ import annotations

import itertools
import os
import threading

from .device import DeviceDomain, DeviceRealm
from .errors import ConfigurationError, EngineFailedError
from .scheduler import DEVICE, HOST, WorkerKind, make_scheduler
from .task import TaskState
from .trace import INSERTER_ID

_tls = threading.local()


def current_worker_id() -> int:
    return getattr(_tls, "wid", INSERTER_ID)


def set_context_id(wid: int) -> None:
    """Tag the calling thread for trace attribution (used by the comm agent)."""
    _tls.wid = wid


class WorkerTeam:
    """A team description: list of (WorkerKind, count) pairs."""

    def __init__(self, spec):
        self.spec = [(kind, int(count)) for kind, count in spec]
        if sum(count for _, count in self.spec) <= 0:
            raise ConfigurationError("a worker team needs at least one worker")

    def kinds(self):
        for kind, count in self.spec:
            for _ in range(count):
                yield kind

    def device_indexes(self):
        return sorted({kind.device for kind, _ in self.spec if kind.kind == DEVICE})

    @staticmethod
    def of_host_workers(n: int) -> "WorkerTeam":
        return WorkerTeam([(WorkerKind.host(), n)])

    @staticmethod
    def of_host_and_device_workers(
        devices: int = 1, host_workers=None, workers_per_device: int = 1
    ) -> "WorkerTeam":
        """Hosts default to hardware parallelism minus the device workers."""
        if host_workers is None:
            host_workers = max(1, (os.cpu_count() or 2) - devices)
        spec = [(WorkerKind.host(), host_workers)]
        for i in range(devices):
            spec.append((WorkerKind.device_worker(i), workers_per_device))
        return WorkerTeam(spec)


class Worker:
    _ids = itertools.count()

    def __init__(self, kind: WorkerKind, engine: "ComputeEngine"):
        self.wid = next(Worker._ids)
        self.kind = kind
        self.engine = engine
        self.parks = 0
        self.wakeups = 0
        self.thread = threading.Thread(
            target=self._loop, name=f"seqflow-w{self.wid}-{kind}", daemon=True
        )

    def __repr__(self):
        return f"<Worker {self.wid} {self.kind}>"

    def _loop(self):
        _tls.wid = self.wid
        while True:
            eng = self.engine
            with eng._lock:
                if eng._stopping:
                    return
                version = eng._version
            task = None
            if eng.failure is None:
                task = eng.scheduler.pop(self.kind)
            if task is not None:
                self._execute(eng, task)
                continue
            with eng._lock:
                if eng._stopping:
                    return
                if self.engine is not eng:
                    continue  # migrated while polling
                # park unless a push slipped in after the version read;
                # a poisoned engine parks until stopped
                if eng._version == version or eng.failure is not None:
                    self.parks += 1
                    eng._conds[self.kind.kind].wait()
                    self.wakeups += 1

    def _execute(self, eng: "ComputeEngine", task) -> None:
        graph = task.graph
        trace = graph.trace
        core = graph.core
        trace.popped(self.wid, task)
        if not task.try_claim():
            # disabled while queued; the disabling path released its accesses
            return
        if not core.acquire_for_execution(task):
            requeue = False
            with task.lock:
                if task.rollback_on_finish:
                    # disabled during the claim window
                    task.rollback_on_finish = False
                    task.state = TaskState.DISABLED
                else:
                    task.state = TaskState.READY
                    requeue = True
            if requeue:
                eng.push(task)
            else:
                graph.dispatch_ready(core.release_access(task))
            return

        trace.task_start(self.wid, task)
        for rec in task.accesses:
            rec.handle.enter_execution(rec.mode, core.violations)
        staged = None
        result = None
        failed = False
        try:
            if self.kind.kind == DEVICE:
                staged, views = eng.realm.stage_in(
                    self.kind.device, task, trace, self.wid
                )
                args = [views[arg.handle.hid] for arg in task.arg_specs]
                result = task.callables[DEVICE](*args)
            else:
                if eng.realm.domains:
                    eng.realm.host_coherency(task)
                result = task.callables[HOST](*task.host_args())
        except BaseException as exc:  # noqa: BLE001 - fail-fast poisoning
            failed = True
            task.error = exc
            eng.poison(exc, task)
        finally:
            if staged is not None:
                eng.realm.stage_out(self.kind.device, task, staged)
            for rec in task.accesses:
                rec.handle.exit_execution(rec.mode)
        trace.task_end(self.wid, task)
        if failed:
            return
        task.finish(result)
        if task.uncertain and graph.speculation_enabled:
            try:
                graph._speculation.resolve(task)
            except BaseException as exc:  # noqa: BLE001
                task.error = exc
                eng.poison(exc, task)
                return
        graph.dispatch_ready(core.release_access(task))


class ComputeEngine:
    """A worker team plus a scheduler, serving any number of attached graphs."""

    def __init__(self, team: WorkerTeam, scheduler=None, device_memory: int = 16 << 20):
        if isinstance(team, (list, tuple)):
            team = WorkerTeam(team)
        self.scheduler = make_scheduler(scheduler)
        self.device_memory = device_memory
        self.realm = DeviceRealm(team.device_indexes(), device_memory)
        self._lock = threading.Lock()
        self._conds = {
            HOST: threading.Condition(self._lock),
            DEVICE: threading.Condition(self._lock),
        }
        self._version = 0
        self._stopping = False
        self.failure = None
        self.failed_task = None
        self.graphs = []
        self.workers = [Worker(kind, self) for kind in team.kinds()]
        for worker in self.workers:
            worker.thread.start()

    # -- graph attachment ---------------------------------------------------

    def adopt(self, graph) -> None:
        with self._lock:
            self.graphs.append(graph)

    def kind_classes(self) -> set:
        with self._lock:
            return {w.kind.kind for w in self.workers}

    # -- scheduling ---------------------------------------------------------

    def push(self, task) -> None:
        """Offer a slot-active task to the scheduler (at most one entry)."""
        if not task.mark_queued():
            return
        # record before the task becomes poppable so Push timestamps always
        # precede the matching Pop
        task.graph.trace.pushed(current_worker_id(), task)
        self.scheduler.push(task)
        with self._lock:
            self._version += 1
            for cls in task.callables:
                self._conds[cls].notify()

    # -- failure ------------------------------------------------------------

    def poison(self, exc, task=None) -> None:
        """First failure wins; attached graphs learn of it and wake waiters."""
        failure = EngineFailedError(
            f"task {task.label} failed: {exc!r}" if task is not None else repr(exc)
        )
        failure.__cause__ = exc
        with self._lock:
            if self.failure is not None:
                return
            self.failure = failure
            self.failed_task = task
            graphs = list(self.graphs)
            self._version += 1
            for cond in self._conds.values():
                cond.notify_all()
        for graph in graphs:
            graph.fail(failure)

    # -- lifecycle ----------------------------------------------------------

    def stop(self) -> None:
        with self._lock:
            if self._stopping:
                workers = []
            else:
                self._stopping = True
                workers = list(self.workers)
            self._version += 1
            for cond in self._conds.values():
                cond.notify_all()
        for worker in workers:
            worker.thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.stop()
        return False

    # -- introspection ------------------------------------------------------

    def worker_count(self, kind_class=None) -> int:
        with self._lock:
            if kind_class is None:
                return len(self.workers)
            return sum(1 for w in self.workers if w.kind.kind == kind_class)

    def total_wakeups(self) -> int:
        with self._lock:
            return sum(w.wakeups for w in self.workers)


def create_engine(team, scheduler=None, device_memory: int = 16 << 20) -> ComputeEngine:
    return ComputeEngine(team, scheduler, device_memory)


def attach_graph(graph, engine: ComputeEngine) -> None:
    graph.compute_on(engine)


def migrate_workers(src: ComputeEngine, dst: ComputeEngine, kind, count: int) -> int:
    """Move up to count workers of the given kind from src to dst.

    A mid-task worker finishes its task first (its loop re-reads the engine
    afterwards).  Returns the number actually moved.
    """
    if src is dst or count <= 0:
        return 0
    kind_class = kind.kind if isinstance(kind, WorkerKind) else str(kind)
    want_index = kind.device if isinstance(kind, WorkerKind) else None
    first, second = sorted((src, dst), key=id)
    with first._lock, second._lock:
        moved = []
        for worker in list(src.workers):
            if len(moved) >= count:
                break
            if worker.kind.kind != kind_class:
                continue
            if want_index is not None and worker.kind.device != want_index:
                continue
            moved.append(worker)
        for worker in moved:
            src.workers.remove(worker)
            dst.workers.append(worker)
            worker.engine = dst
            if worker.kind.kind == DEVICE and worker.kind.device not in dst.realm.domains:
                # give the arriving worker an arena to stage into
                dst.realm.domains[worker.kind.device] = DeviceDomain(
                    worker.kind.device, dst.device_memory
                )
        src._version += 1
        dst._version += 1
        for cond in src._conds.values():
            cond.notify_all()
        for cond in dst._conds.values():
            cond.notify_all()
    return len(moved)
