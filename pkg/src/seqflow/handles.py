"""Per-object dependency ledgers and the ordering/readiness/release algorithms.

Every data object used as a dependency gets a handle holding an ordered list
of access slots.  A slot is a maximal run of consecutive compatible accesses
(reads, atomic writes, or commutative writes) or a single exclusive write.
Slot i+1 never activates before every task of slot i has released.

Locking discipline (outermost first):
    graph commute lock  >  handle lock  >  task lock  >  scheduler/engine locks
Handle guards (commutative exclusivity) are touched only under the graph's
commute lock; slot state only under the handle lock.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Optional

from .access import AccessMode, SlotCategory, category_of
from .errors import InternalConsistencyError, RegistrationError


class AccessSlot:
    """One ordered slot on a handle: a grouping category plus its member tasks."""

    __slots__ = ("category", "tasks", "done")

    def __init__(self, category: SlotCategory):
        self.category = category
        self.tasks = []
        self.done = 0

    def complete(self) -> bool:
        return self.done >= len(self.tasks)


class DataHandle:
    """Dependency ledger for one registered object.

    ``active_index`` is the index of the slot whose members may currently run;
    it only increases.  ``guard_owner`` is the task holding the commutative
    exclusivity guard, if any (guarded by the graph commute lock, not the
    handle lock).
    """

    __slots__ = (
        "hid",
        "key",
        "obj",
        "nbytes",
        "generation",
        "slots",
        "active_index",
        "lock",
        "guard_owner",
        "comm_used",
        "spec_epoch",
        "internal",
        "device_blocks",
        "_exec_counts",
        "advancements",
    )

    def __init__(self, hid: int, key, obj, nbytes: int, generation: int, internal: bool = False):
        self.hid = hid
        self.key = key
        self.obj = obj
        self.nbytes = nbytes
        self.generation = generation
        self.slots: list[AccessSlot] = []
        self.active_index = 0
        self.lock = threading.Lock()
        self.guard_owner = None
        self.comm_used = False
        self.spec_epoch = None
        self.internal = internal
        self.device_blocks = {}  # device index -> DeviceBlock
        # instrumentation: concurrent executions per slot category
        self._exec_counts = {cat: 0 for cat in SlotCategory}
        self.advancements = 0

    def __repr__(self):
        return f"<DataHandle {self.hid} slots={len(self.slots)} active={self.active_index}>"

    # -- conflict instrumentation ------------------------------------------

    def enter_execution(self, mode: AccessMode, violations: list):
        cat = category_of(mode)
        with self.lock:
            self._exec_counts[cat] += 1
            c = self._exec_counts
            excl = c[SlotCategory.EXCLUSIVE]
            commute = c[SlotCategory.COMMUTE_GROUP]
            reads = c[SlotCategory.READ_GROUP]
            atomics = c[SlotCategory.ATOMIC_GROUP]
            bad = (
                excl > 1
                or (excl >= 1 and (reads or atomics or commute))
                or commute > 1
                or (commute >= 1 and (reads or atomics))
                or (reads >= 1 and atomics >= 1)
            )
            if bad:
                violations.append(
                    f"handle {self.hid}: concurrent conflicting executions {dict((k.value, v) for k, v in c.items() if v)}"
                )

    def exit_execution(self, mode: AccessMode):
        with self.lock:
            self._exec_counts[category_of(mode)] -= 1


class HandleRegistry:
    """Maps object identity to live data handles.

    Keys are (raw identity, generation): unregistering bumps the generation so
    a new object at a recycled address can never alias a stale handle.  The
    registry keeps a strong reference to each live object, which also prevents
    the interpreter from recycling its identity while registered.
    """

    # hids are process-global: device arenas key blocks by hid, and one
    # engine may serve several graphs, so two registries must never mint
    # the same id
    _ids = itertools.count(1)

    def __init__(self):
        self._live = {}  # raw key -> DataHandle
        self._generations = {}  # raw key -> int
        self._all = []  # every handle ever registered, for export
        self._lock = threading.Lock()

    @staticmethod
    def _raw_key(obj, element: Optional[int] = None):
        if element is None:
            return id(obj)
        return (id(obj), element)

    def register(self, obj, nbytes: int = 0, element: Optional[int] = None,
                 internal: bool = False) -> DataHandle:
        raw = self._raw_key(obj, element)
        with self._lock:
            if raw in self._live:
                raise RegistrationError(
                    f"object {type(obj).__name__} (element={element}) is already registered"
                )
            gen = self._generations.get(raw, 0) + 1
            self._generations[raw] = gen
            handle = DataHandle(next(self._ids), (raw, gen), obj, nbytes, gen, internal=internal)
            self._live[raw] = handle
            self._all.append(handle)
            return handle

    def lookup(self, obj, element: Optional[int] = None) -> Optional[DataHandle]:
        with self._lock:
            return self._live.get(self._raw_key(obj, element))

    def ensure(self, obj, nbytes: int = 0, element: Optional[int] = None) -> DataHandle:
        """Return the live handle for ``obj``, registering it on first use."""
        raw = self._raw_key(obj, element)
        with self._lock:
            handle = self._live.get(raw)
            if handle is not None:
                return handle
            gen = self._generations.get(raw, 0) + 1
            self._generations[raw] = gen
            handle = DataHandle(next(self._ids), (raw, gen), obj, nbytes, gen)
            self._live[raw] = handle
            self._all.append(handle)
            return handle

    def unregister(self, obj, element: Optional[int] = None) -> None:
        raw = self._raw_key(obj, element)
        with self._lock:
            handle = self._live.pop(raw, None)
        if handle is None:
            raise RegistrationError("object is not registered")
        with handle.lock:
            incomplete = handle.active_index < len(handle.slots)
        if incomplete:
            raise RegistrationError("cannot unregister an object with pending accesses")

    def all_handles(self) -> list:
        with self._lock:
            return list(self._all)

    def user_handles(self) -> list:
        return [h for h in self.all_handles() if not h.internal]


class DependencyCore:
    """STF ordering, readiness, acquisition and release for one task graph.

    ``on_released`` is called once per task whose accesses were released
    (finished or disabled); the graph uses it for termination accounting.
    Commutative guard transitions serialize through ``commute_lock``, one
    per graph.
    """

    def __init__(self, registry: HandleRegistry, on_released: Callable):
        self.registry = registry
        self.commute_lock = threading.Lock()
        self.on_released = on_released
        self.violations: list[str] = []

    # -- insertion ----------------------------------------------------------

    def append_access(self, handle: DataHandle, mode: AccessMode, task, acc) -> int:
        """Append one access to the handle's slot list.

        Returns the slot index.  If the slot is not active yet, the task's
        pending counter is incremented under the handle lock, so the later
        activation (same lock) observes the increment.
        """
        cat = category_of(mode)
        grouping = cat is not SlotCategory.EXCLUSIVE
        with handle.lock:
            slots = handle.slots
            if (
                grouping
                and slots
                and slots[-1].category is cat
                and handle.active_index <= len(slots) - 1
            ):
                slot = slots[-1]
            else:
                slot = AccessSlot(cat)
                slots.append(slot)
            slot.tasks.append(task)
            index = len(slots) - 1
            acc.handle = handle
            acc.slot_index = index
            if index != handle.active_index:
                task.add_pending()
            return index

    # -- readiness ----------------------------------------------------------

    def task_slot_active(self, task) -> bool:
        """True iff every access of the task sits in its handle's active slot."""
        for acc in task.accesses:
            if acc.slot_index != acc.handle.active_index:
                return False
        return True

    # -- execution-time acquisition ----------------------------------------

    def acquire_for_execution(self, task) -> bool:
        """Try to take the exclusivity guard of every commutative handle.

        All-or-nothing, in ascending handle id order, under the global
        commutative coordination region.  Never blocks while holding a
        subset of guards.
        """
        targets = task.commute_handles
        if not targets:
            return True
        with self.commute_lock:
            taken = []
            for handle in targets:  # pre-sorted by handle id at insertion
                if handle.guard_owner is None:
                    handle.guard_owner = task
                    taken.append(handle)
                else:
                    for t in taken:
                        t.guard_owner = None
                    return False
            task.held_guards = taken
        return True

    # -- release ------------------------------------------------------------

    def release_access(self, task) -> list:
        """Release the task's slots (and guards) and collect newly ready tasks.

        Ready tasks are returned for scheduler push; tasks that were disabled
        while waiting are released here as well, so a chain of disabled tasks
        drains without recursion.
        """
        ready = []
        worklist = [task]
        while worklist:
            self._release_one(worklist.pop(), ready, worklist)
        return ready

    def _release_one(self, task, ready: list, worklist: list) -> None:
        with task.lock:
            if task.released:
                raise InternalConsistencyError(f"double release of task {task.tid}")
            task.released = True
        guards = task.held_guards
        if guards:
            with self.commute_lock:
                for handle in guards:
                    if handle.guard_owner is not task:
                        raise InternalConsistencyError(
                            f"task {task.tid} released a guard it does not hold"
                        )
                    handle.guard_owner = None
            task.held_guards = []

        touched_commute = []
        for acc in task.accesses:
            handle = acc.handle
            with handle.lock:
                slot = handle.slots[acc.slot_index]
                slot.done += 1
                if acc.slot_index == handle.active_index and slot.complete():
                    self._advance(handle, ready, worklist)
            if acc.mode is AccessMode.COMMUTATIVE_WRITE:
                touched_commute.append(handle)

        # A released guard may unblock other members of the active commutative
        # slot that failed acquisition earlier; re-offer each at most once
        # (the push-side queued flag deduplicates).
        for handle in touched_commute:
            with handle.lock:
                if handle.active_index >= len(handle.slots):
                    continue
                slot = handle.slots[handle.active_index]
                if slot.category is not SlotCategory.COMMUTE_GROUP:
                    continue
                for other in slot.tasks:
                    if other is task:
                        continue
                    if other.is_ready_unqueued():
                        ready.append(other)
        self.on_released(task)

    def _advance(self, handle: DataHandle, ready: list, worklist: list) -> None:
        # caller holds handle.lock; the active slot is complete
        prev = handle.active_index
        handle.active_index += 1
        handle.advancements += 1
        assert handle.active_index == prev + 1
        if handle.active_index >= len(handle.slots):
            return
        for member in handle.slots[handle.active_index].tasks:
            outcome = member.dec_pending()
            if outcome == "ready":
                ready.append(member)
            elif outcome == "disabled":
                worklist.append(member)
