"""Task objects, their state machine, and the viewer returned at insertion."""

from __future__ import annotations

import enum
import threading

from .errors import InternalConsistencyError, TaskDisabledError, TaskFailedError


class TaskState(enum.Enum):
    INSERTED = "inserted"
    READY = "ready"
    EXECUTING = "executing"
    FINISHED = "finished"
    DISABLED = "disabled"


class ResolvedAccess:
    """One access bound to its handle and slot (filled at insertion)."""

    __slots__ = ("mode", "handle", "slot_index")

    def __init__(self, mode):
        self.mode = mode
        self.handle = None
        self.slot_index = None

    def __repr__(self):
        hid = self.handle.hid if self.handle is not None else "?"
        return f"ResolvedAccess({self.mode.value}, h{hid}@{self.slot_index})"


class ArgSpec:
    """One callable argument: the declared object plus its bound records.

    Whole-object dependencies carry a single record; array views carry one
    per selected element.
    """

    __slots__ = ("mode", "obj", "view", "records")

    def __init__(self, mode, obj, view, records):
        self.mode = mode
        self.obj = obj
        self.view = view
        self.records = records

    @property
    def handle(self):
        return self.records[0].handle


class Task:
    """A callable bundle with declared accesses and a small state machine.

    ``pending`` counts handles whose slot has not activated yet, plus one
    insertion guard dropped when declaration completes.  ``queued`` is true
    while the task sits in a scheduler; push/pop transitions go through the
    compare-and-set helpers so a task is offered at most once at a time.
    """

    _COUNTER = threading.Lock()
    _next_id = 0

    def __init__(self, graph, callables, priority=0, name=None):
        with Task._COUNTER:
            Task._next_id += 1
            self.tid = Task._next_id
        self.graph = graph
        self.callables = callables  # {"host": fn} and/or {"device": fn}
        self.priority = priority
        self.name = name
        self.state = TaskState.INSERTED
        self.lock = threading.Lock()
        self.pending = 1  # insertion guard
        self.queued = False
        self.released = False
        self.accesses = []  # resolved per-handle accesses
        self.arg_specs = []  # declaration-order specs for callable arguments
        self.commute_handles = []
        self.held_guards = []
        self.result = None
        self.error = None
        self.comm_op = None
        self.uncertain = False  # has maybe-write accesses in a speculative graph
        self.spec_role = None  # "snapshot" | "duplicate" | "select" for internal tasks
        self.spec_pair = None  # links an original and its speculative duplicate
        self.rollback_on_finish = False
        self.epoch = None  # speculation epoch this task resolves (uncertain tasks)

    def __repr__(self):
        label = self.name or f"task{self.tid}"
        return f"<Task {label} {self.state.value}>"

    @property
    def label(self):
        return self.name if self.name else f"task{self.tid}"

    def runnable_by(self, kind) -> bool:
        return kind in self.callables

    # -- pending counter ----------------------------------------------------

    def add_pending(self):
        with self.lock:
            self.pending += 1

    def dec_pending(self):
        """Drop one pending dependency; returns "ready", "disabled", or None."""
        with self.lock:
            self.pending -= 1
            if self.pending > 0:
                return None
            if self.pending < 0:
                raise InternalConsistencyError(f"negative pending count on task {self.tid}")
            if self.state is TaskState.DISABLED:
                return "disabled"
            if self.state is TaskState.INSERTED:
                self.state = TaskState.READY
                return "ready"
            raise InternalConsistencyError(
                f"task {self.tid} reached zero pending in state {self.state}"
            )

    # -- queue flag ---------------------------------------------------------

    def mark_queued(self) -> bool:
        with self.lock:
            if self.queued:
                return False
            self.queued = True
            return True

    def unmark_queued(self) -> bool:
        with self.lock:
            if not self.queued:
                return False
            self.queued = False
            return True

    def is_ready_unqueued(self) -> bool:
        with self.lock:
            return self.state is TaskState.READY and not self.queued

    # -- execution claim ----------------------------------------------------

    def try_claim(self) -> bool:
        with self.lock:
            if self.state is not TaskState.READY:
                return False
            self.state = TaskState.EXECUTING
            return True

    def finish(self, result):
        with self.lock:
            if self.state is not TaskState.EXECUTING:
                raise InternalConsistencyError(
                    f"task {self.tid} finished from state {self.state}"
                )
            # A speculative duplicate losing its race ends Disabled even if
            # its body physically ran; its outputs are discarded.
            self.state = TaskState.DISABLED if self.rollback_on_finish else TaskState.FINISHED
            self.result = result

    def disable(self) -> str:
        """Move the task to Disabled; returns what follow-up the caller owes.

        "release" means the task was already runnable and its accesses must be
        released now; "none" means the normal readiness path will notice the
        disabled state; "running" defers to the executing body's completion.
        """
        with self.lock:
            if self.state in (TaskState.INSERTED, TaskState.READY):
                was_ready = self.state is TaskState.READY
                self.state = TaskState.DISABLED
                return "release" if was_ready else "none"
            if self.state is TaskState.EXECUTING:
                self.rollback_on_finish = True
                return "running"
            if self.state is TaskState.FINISHED:
                self.state = TaskState.DISABLED
                return "relabel"
            return "none"

    def terminal(self) -> bool:
        return self.state in (TaskState.FINISHED, TaskState.DISABLED)

    def settled(self) -> bool:
        """Terminal, and if speculatively paired, the whole pair is terminal."""
        if not self.terminal():
            return False
        pair = self.spec_pair
        if pair is None:
            return True
        return pair.original.terminal() and pair.duplicate.terminal()

    def host_args(self) -> list:
        from .access import ArrayAccessor

        args = []
        for spec in self.arg_specs:
            if spec.view is None:
                args.append(spec.obj)
            else:
                args.append(ArrayAccessor(spec.obj, spec.view))
        return args


class TaskViewer:
    """Lightweight reference to one inserted task.

    Allows naming the task, waiting for it, and reading its produced value.
    Names set after the task ran still apply to trace export but are invisible
    to the scheduler.
    """

    def __init__(self, task: Task):
        self._task = task

    @property
    def task_id(self) -> int:
        return self._task.tid

    @property
    def state(self) -> TaskState:
        return self._task.state

    def set_name(self, name: str) -> "TaskViewer":
        self._task.name = name
        return self

    def wait(self, timeout=None) -> None:
        """Block until the task is Finished or Disabled.

        Calling this from inside a task of the same graph can deadlock (the
        worker cannot run the awaited task); that hazard is on the caller.
        """
        self._task.graph._wait_for_task(self._task, timeout)

    def get_value(self):
        """Block until the task settles and return the callable's value.

        If speculation replaced this task with its duplicate, the surviving
        branch's value is returned.  Raises ``TaskDisabledError`` when the
        branch was cancelled with no survivor and ``ValueError`` when the
        callable produced no value.
        """
        self.wait()
        task = self._task
        if task.state is TaskState.DISABLED and task.spec_pair is not None:
            for candidate in (task.spec_pair.original, task.spec_pair.duplicate):
                if candidate.state is TaskState.FINISHED:
                    task = candidate
                    break
        if task.state is TaskState.DISABLED:
            raise TaskDisabledError(f"{task.label} was cancelled by speculation")
        if task.error is not None:
            raise TaskFailedError(f"{task.label} raised") from task.error
        if task.result is None:
            raise ValueError(f"{task.label} produced no value")
        return task.result
