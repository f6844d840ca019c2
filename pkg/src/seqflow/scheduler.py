"""Pluggable scheduling: the push/pop contract plus FIFO and priority defaults.

A scheduler never decides correctness, only order.  Tasks arrive already
slot-active; pop must hand back only tasks runnable by the requesting worker
kind.  Tasks carrying both a host and a device callable are entered in every
matching queue and claimed atomically through the task's queued flag, so the
first popper wins and later entries are dropped as stale.

Scheduler internals may take a task's flag lock while holding their own lock;
no runtime path acquires a scheduler lock while holding a task lock.
"""

from __future__ import annotations

import abc
import heapq
import itertools
import threading
from collections import deque
from dataclasses import dataclass

from .errors import ConfigurationError

HOST = "host"
DEVICE = "device"


@dataclass(frozen=True)
class WorkerKind:
    """Classification of a worker: host, or device with an arena index."""

    kind: str
    device: int | None = None

    @staticmethod
    def host() -> "WorkerKind":
        return WorkerKind(HOST)

    @staticmethod
    def device_worker(index: int) -> "WorkerKind":
        return WorkerKind(DEVICE, index)

    def __str__(self):
        return self.kind if self.device is None else f"{self.kind}{self.device}"


class Scheduler(abc.ABC):
    """Contract: push(task), pop(kind) -> task or None, ready_count() -> int.

    All three may be called concurrently from any context.
    """

    @abc.abstractmethod
    def push(self, task) -> None:
        ...

    @abc.abstractmethod
    def pop(self, kind: WorkerKind):
        ...

    @abc.abstractmethod
    def ready_count(self) -> int:
        ...


class FifoScheduler(Scheduler):
    """One queue per worker-kind class; pop order equals push order per kind."""

    def __init__(self):
        self._lock = threading.Lock()
        self._queues = {HOST: deque(), DEVICE: deque()}
        self._count = 0

    def push(self, task) -> None:
        with self._lock:
            for cls in (HOST, DEVICE):
                if cls in task.callables:
                    self._queues[cls].append(task)
            self._count += 1

    def pop(self, kind: WorkerKind):
        q = self._queues[kind.kind]
        with self._lock:
            while q:
                task = q.popleft()
                # Stale twin entries (claimed through another queue) fail here.
                if task.unmark_queued():
                    self._count -= 1
                    return task
            return None

    def ready_count(self) -> int:
        with self._lock:
            return self._count


class PriorityScheduler(Scheduler):
    """Pops a maximal-priority compatible task; ties broken by push order."""

    def __init__(self):
        self._lock = threading.Lock()
        self._heaps = {HOST: [], DEVICE: []}
        self._seq = itertools.count()
        self._count = 0

    def push(self, task) -> None:
        with self._lock:
            seq = next(self._seq)
            for cls in (HOST, DEVICE):
                if cls in task.callables:
                    heapq.heappush(self._heaps[cls], (-task.priority, seq, task))
            self._count += 1

    def pop(self, kind: WorkerKind):
        heap = self._heaps[kind.kind]
        with self._lock:
            while heap:
                _, _, task = heapq.heappop(heap)
                if task.unmark_queued():
                    self._count -= 1
                    return task
            return None

    def ready_count(self) -> int:
        with self._lock:
            return self._count


_BY_NAME = {"fifo": FifoScheduler, "prio": PriorityScheduler}


def make_scheduler(spec) -> Scheduler:
    """Accepts a Scheduler instance, a name ("fifo", "prio"), or None."""
    if spec is None:
        return FifoScheduler()
    if isinstance(spec, Scheduler):
        return spec
    if isinstance(spec, str):
        try:
            return _BY_NAME[spec]()
        except KeyError:
            raise ConfigurationError(
                f"unknown scheduler {spec!r}; expected one of {sorted(_BY_NAME)}"
            ) from None
    if isinstance(spec, type) and issubclass(spec, Scheduler):
        return spec()
    raise ConfigurationError(f"cannot build a scheduler from {spec!r}")
