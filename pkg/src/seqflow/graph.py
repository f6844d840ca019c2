"""Task graphs: the single-inserter API surface of the runtime.

A graph owns its handle registry and dependency core, attaches to exactly one
compute engine, and exposes task insertion, waits, device flush, inter-instance
communication, and trace export.  Tasks are inserted by one thread (checked
with a debug assertion only); the runtime's own helper insertions (speculation
select tasks) are exempt from that contract.
"""

from __future__ import annotations

import logging
import threading
import time

from .access import AccessMode, AccessSpec, write
from .errors import ConfigurationError, DuplicateAccessError
from .handles import DependencyCore, HandleRegistry
from .scheduler import DEVICE, HOST
from .task import ArgSpec, ResolvedAccess, Task, TaskState, TaskViewer
from . import trace as trace_mod

log = logging.getLogger("seqflow")


class TaskGraph:
    """Sequential task flow over declared data accesses.

    Tasks run in parallel whenever their declared accesses allow it, and the
    final state of every object equals what sequential execution in insertion
    order would produce.
    """

    def __init__(self, speculation: bool = False, trace: bool = True):
        self.registry = HandleRegistry()
        self.core = DependencyCore(self.registry, self._on_released)
        self.engine = None
        self.trace = trace_mod.TraceRecorder(enabled=trace)
        self.speculation_enabled = speculation
        if speculation:
            from .speculation import SpeculationManager

            self._speculation = SpeculationManager(self)
        else:
            self._speculation = None
        self.comm = None  # bound communication instance, if any
        self._cv = threading.Condition(threading.Lock())
        self.failure = None
        self.inserted = 0
        self.completed = 0
        self._tasks = []
        self._inserter_ident = None
        self._warned_unservable = False

    # -- attachment ---------------------------------------------------------

    def compute_on(self, engine) -> "TaskGraph":
        """Attach to an engine; required before the first insertion."""
        if self.engine is not None:
            raise ConfigurationError("graph is already attached to an engine")
        self.engine = engine
        engine.adopt(self)
        self.trace.start_clock()
        return self

    # -- registration -------------------------------------------------------

    def register(self, obj, nbytes: int = 0):
        """Pre-register an object; insertion registers implicitly otherwise."""
        return self.registry.register(obj, nbytes)

    def unregister(self, obj) -> None:
        self.registry.unregister(obj)

    # -- insertion ----------------------------------------------------------

    def task(self, *accesses, host=None, device=None, priority: int = 0, name=None):
        """Insert one task; returns a viewer.

        ``accesses`` are built with read/write/atomic_write/commutative_write/
        maybe_write (or their array variants); ``host`` and ``device`` are the
        per-worker-kind callables, called with the declared objects in
        declaration order.
        """
        if __debug__:
            ident = threading.get_ident()
            assert self._inserter_ident in (None, ident), (
                "tasks must be inserted by a single thread"
            )
            self._inserter_ident = ident
        if self.engine is None:
            raise ConfigurationError("attach the graph to an engine before inserting")
        callables = {}
        if host is not None:
            callables[HOST] = host
        if device is not None:
            callables[DEVICE] = device
        if not callables:
            raise ConfigurationError("a task needs a host or device callable")
        specs = []
        for spec in accesses:
            if not isinstance(spec, AccessSpec):
                raise ConfigurationError(
                    f"accesses must be built with the access helpers, got {spec!r}"
                )
            specs.append(spec)
        if self._speculation is not None:
            task = self._speculation.intercept(specs, callables, priority, name)
        else:
            task = self._insert_raw(specs, callables, priority, name)
        return TaskViewer(task)

    def _insert_raw(
        self,
        specs,
        callables,
        priority: int = 0,
        name=None,
        uncertain: bool = False,
        spec_role=None,
        comm_op=None,
        internal_handles: bool = False,
    ) -> Task:
        """Bind accesses to handles in declaration order and enliven the task."""
        task = Task(self, callables, priority, name)
        task.uncertain = uncertain
        task.spec_role = spec_role
        task.comm_op = comm_op
        seen = set()
        for spec in specs:
            records = []
            if spec.view is None:
                handle = self.registry.ensure(spec.obj)
                if handle.hid in seen:
                    raise DuplicateAccessError(
                        f"task declares {type(spec.obj).__name__} twice"
                    )
                seen.add(handle.hid)
                records.append(self._bind(handle, spec.mode, task))
            else:
                for element in spec.view:
                    handle = self.registry.ensure(spec.obj, element=element)
                    if handle.hid in seen:
                        raise DuplicateAccessError(
                            f"task declares element {element} twice"
                        )
                    seen.add(handle.hid)
                    records.append(self._bind(handle, spec.mode, task))
            task.arg_specs.append(ArgSpec(spec.mode, spec.obj, spec.view, records))
        task.commute_handles = sorted(
            (
                rec.handle
                for rec in task.accesses
                if rec.mode is AccessMode.COMMUTATIVE_WRITE
            ),
            key=lambda h: h.hid,
        )
        with self._cv:
            self.inserted += 1
        self._tasks.append(task)
        outcome = task.dec_pending()  # drop the insertion guard
        if outcome == "ready":
            self.dispatch_ready([task])
        elif outcome == "disabled":
            self.dispatch_ready(self.core.release_access(task))
        return task

    def _bind(self, handle, mode, task) -> ResolvedAccess:
        rec = ResolvedAccess(mode)
        self.core.append_access(handle, mode, task, rec)
        task.accesses.append(rec)
        return rec

    # -- dispatch -----------------------------------------------------------

    def dispatch_ready(self, tasks) -> None:
        """Route newly ready tasks: communication to the agent, rest to the engine."""
        for task in tasks:
            if task.comm_op is not None:
                self.comm.agent.submit(task)
            else:
                self.engine.push(task)

    # -- termination accounting --------------------------------------------

    def _on_released(self, task) -> None:
        with self._cv:
            self.completed += 1
            self._cv.notify_all()

    def fail(self, failure) -> None:
        with self._cv:
            if self.failure is None:
                self.failure = failure
            self._cv.notify_all()

    # -- waiting ------------------------------------------------------------

    def wait_all(self, timeout=None) -> bool:
        """Block until every inserted task released (finished or disabled).

        Raises the engine failure if a task failed.  Returns False only when
        the optional timeout expires first.  Calling this from inside a task
        of this graph deadlocks; don't.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while True:
                if self.failure is not None:
                    raise self.failure
                if self.completed >= self.inserted:
                    return True
                if deadline is not None and time.monotonic() >= deadline:
                    return False
                got = self._cv.wait(timeout=0.5)
                if not got:
                    self._check_unservable()

    def _check_unservable(self) -> None:
        # called with _cv held on a wait_all stall
        if self._warned_unservable or self.engine is None:
            return
        servable = self.engine.kind_classes()
        stuck = [
            t
            for t in self._tasks
            if t.state is TaskState.READY
            and t.comm_op is None
            and not (set(t.callables) & servable)
        ]
        if stuck:
            self._warned_unservable = True
            names = ", ".join(t.label for t in stuck[:8])
            log.warning(
                "graph stalled: %d ready task(s) no attached worker kind can "
                "run (%s); worker kinds available: %s",
                len(stuck),
                names,
                sorted(servable) or "none",
            )

    def _wait_for_task(self, task, timeout=None) -> None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while not task.settled():
                if self.failure is not None and not task.terminal():
                    raise self.failure
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TimeoutError(f"timed out waiting for {task.label}")
                    self._cv.wait(timeout=min(remaining, 0.5))
                else:
                    self._cv.wait(timeout=0.5)

    # -- device -------------------------------------------------------------

    def flush_to_host(self, obj) -> TaskViewer:
        """Insert an empty host task writing obj; device copies drain before it."""
        return self.task(write(obj), host=lambda _obj: None, name="flush")

    # -- communication ------------------------------------------------------

    def use_comm(self, instance) -> "TaskGraph":
        if self.comm is not None and self.comm is not instance:
            raise ConfigurationError("graph is already bound to a communicator")
        self.comm = instance
        instance.adopt(self)
        return self

    def send(self, obj, dest: int, tag: int) -> TaskViewer:
        from .comms import comm_send

        return comm_send(self, obj, dest, tag)

    def recv(self, obj, src: int, tag: int) -> TaskViewer:
        from .comms import comm_recv

        return comm_recv(self, obj, src, tag)

    def broadcast(self, obj, root: int) -> TaskViewer:
        from .comms import comm_broadcast

        return comm_broadcast(self, obj, root)

    # -- export -------------------------------------------------------------

    def all_tasks(self) -> list:
        return list(self._tasks)

    def generate_dot(self, path=None, show_deps: bool = False) -> str:
        return trace_mod.generate_dot(self, path, show_deps)

    def generate_trace_svg(self, path=None, show_dep_arrows: bool = False) -> str:
        return trace_mod.generate_trace_svg(self, path, show_dep_arrows)
