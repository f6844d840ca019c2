"""Speculative execution over maybe-write accesses.

When a graph is created with speculation enabled, a task declaring a
maybe-write on X becomes an uncertain task U: a snapshot task C copies X into
a hidden X' first, and an epoch opens over X.  While the epoch is open, a
later task T that only reads X is duplicated: T' runs against X' (so it can
overlap U), writing hidden copies of T's outputs, and a select task S installs
the surviving values once U's outcome is known.  U's callable must return a
boolean saying whether it actually wrote; on False the duplicates win and the
originals are disabled, on True the duplicates are discarded.

Exactly one branch of each (T, T') pair finishes; the other ends disabled.
The epoch closes at resolution, at any successor that writes the protected
object, or at any successor the single implemented model cannot duplicate
soundly (atomic or commutative writers, multi-epoch tasks, uncertain
successors).  Duplication depth is one: duplicates are never speculated over.

The manager's lock sits above every other runtime lock: insertion and resolve
hold it while touching handles and tasks, and never the other way around.
"""

from __future__ import annotations

import copy
import threading

from .access import AccessMode, AccessSpec
from .errors import SpeculationError
from .scheduler import DEVICE, HOST


def duplicable(obj) -> bool:
    if hasattr(obj, "duplicate") and hasattr(obj, "assign_from"):
        return True
    try:
        view = memoryview(obj)
    except TypeError:
        return False
    return not view.readonly and view.contiguous


def duplicate_value(obj):
    if hasattr(obj, "duplicate"):
        return obj.duplicate()
    return copy.deepcopy(obj)


def assign_value(dst, src) -> None:
    if hasattr(dst, "assign_from"):
        dst.assign_from(src)
    else:
        memoryview(dst).cast("B")[:] = memoryview(src).cast("B")


class SpecPair:
    """One original/duplicate couple plus its select task and outputs."""

    __slots__ = ("original", "duplicate", "select", "outputs")

    def __init__(self, original, dup, select, outputs):
        self.original = original
        self.duplicate = dup
        self.select = select
        self.outputs = outputs  # list of (original obj, hidden copy)


class SpecEpoch:
    """Everything hanging off one uncertain task."""

    def __init__(self, u_task=None):
        self.u_task = u_task
        self.protected = {}  # hid -> (original obj, snapshot obj)
        self.pairs = []
        self.open = True
        self.did_write = None


class SpeculationManager:
    def __init__(self, graph):
        self.graph = graph
        self.lock = threading.Lock()
        self.by_handle = {}  # hid -> open SpecEpoch
        self.epochs = []

    # -- insertion interception ---------------------------------------------

    def intercept(self, specs, callables, priority, name):
        with self.lock:
            maybe_specs = [s for s in specs if s.mode is AccessMode.MAYBE_WRITE]
            touched = self._touched_epochs(specs)
            if maybe_specs:
                return self._insert_uncertain(
                    specs, maybe_specs, touched, callables, priority, name
                )
            if not touched:
                return self.graph._insert_raw(specs, callables, priority, name)
            return self._insert_successor(
                specs, touched, callables, priority, name
            )

    def _touched_epochs(self, specs):
        """Open epochs this task's whole-object accesses fall into."""
        touched = {}
        for spec in specs:
            if spec.view is not None:
                continue
            handle = self.graph.registry.lookup(spec.obj)
            if handle is None:
                continue
            epoch = self.by_handle.get(handle.hid)
            if epoch is not None and epoch.open:
                touched.setdefault(id(epoch), (epoch, []))[1].append((spec, handle))
        return list(touched.values())

    def _close_epoch(self, epoch: SpecEpoch) -> None:
        epoch.open = False
        for hid in epoch.protected:
            if self.by_handle.get(hid) is epoch:
                del self.by_handle[hid]

    # -- uncertain tasks -----------------------------------------------------

    def _insert_uncertain(self, specs, maybe_specs, touched, callables, priority, name):
        for spec in maybe_specs:
            if spec.view is not None:
                raise SpeculationError(
                    "maybe-write on array elements is not supported in a "
                    "speculative graph"
                )
            if not duplicable(spec.obj):
                raise SpeculationError(
                    f"{type(spec.obj).__name__} cannot be snapshotted: provide "
                    "duplicate()/assign_from() or a writable contiguous buffer"
                )
            if self.graph.registry.ensure(spec.obj).comm_used:
                raise SpeculationError(
                    "maybe-write target is used by communication tasks; "
                    "speculation and communication are mutually exclusive"
                )
        if DEVICE in callables:
            raise SpeculationError(
                "an uncertain task cannot carry a device callable"
            )
        # depth 1: an uncertain successor is not duplicated; it starts fresh
        for epoch, _ in touched:
            self._close_epoch(epoch)
        epoch = SpecEpoch()
        for spec in maybe_specs:
            handle = self.graph.registry.ensure(spec.obj)
            snapshot = duplicate_value(spec.obj)
            self.graph.registry.register(snapshot, internal=True)
            self.graph._insert_raw(
                [AccessSpec(AccessMode.READ, spec.obj), AccessSpec(AccessMode.WRITE, snapshot)],
                {HOST: _copy_body},
                priority,
                f"snap:h{handle.hid}",
                spec_role="snapshot",
            )
            epoch.protected[handle.hid] = (spec.obj, snapshot)
            self.by_handle[handle.hid] = epoch
        task = self.graph._insert_raw(
            specs, callables, priority, name, uncertain=True
        )
        epoch.u_task = task
        task.epoch = epoch
        self.epochs.append(epoch)
        return task

    # -- successors ----------------------------------------------------------

    def _insert_successor(self, specs, touched, callables, priority, name):
        if len(touched) > 1:
            # one task under two pending outcomes would need four variants
            for epoch, _ in touched:
                self._close_epoch(epoch)
            return self.graph._insert_raw(specs, callables, priority, name)
        epoch, prot_specs = touched[0]
        writes_protected = any(
            spec.mode is not AccessMode.READ for spec, _ in prot_specs
        )
        grouped_writer = any(
            spec.mode in (AccessMode.ATOMIC_WRITE, AccessMode.COMMUTATIVE_WRITE)
            for spec in specs
        )
        outputs = [
            spec
            for spec in specs
            if spec.mode is AccessMode.WRITE and spec.view is None
        ]
        view_writer = any(spec.mode.writes and spec.view is not None for spec in specs)
        if writes_protected or grouped_writer or view_writer:
            # the single model only duplicates plain read-in/write-out tasks
            self._close_epoch(epoch)
            return self.graph._insert_raw(specs, callables, priority, name)
        if DEVICE in callables:
            raise SpeculationError(
                "a task reading a maybe-written object while its outcome is "
                "pending cannot carry a device callable"
            )
        for spec in outputs:
            if not duplicable(spec.obj):
                raise SpeculationError(
                    f"output {type(spec.obj).__name__} cannot be duplicated "
                    "for speculation"
                )

        graph = self.graph
        label = name or "task"

        # pre-state snapshots of the outputs, so a read-modify-write body
        # sees the same starting value on both branches
        out_pairs = []
        for spec in outputs:
            hidden = duplicate_value(spec.obj)
            graph.registry.register(hidden, internal=True)
            graph._insert_raw(
                [AccessSpec(AccessMode.READ, spec.obj), AccessSpec(AccessMode.WRITE, hidden)],
                {HOST: _copy_body},
                priority,
                f"{label}~pre",
                spec_role="snapshot",
            )
            out_pairs.append((spec.obj, hidden))
        substitution = {id(orig): hidden for orig, hidden in out_pairs}
        for hid, (orig, snapshot) in epoch.protected.items():
            substitution[id(orig)] = snapshot

        dup_specs = []
        for spec in specs:
            replaced = substitution.get(id(spec.obj))
            if replaced is not None:
                dup_specs.append(AccessSpec(spec.mode, replaced, spec.view))
            else:
                dup_specs.append(spec)
        duplicate = graph._insert_raw(
            dup_specs, callables, priority, f"{label}~spec", spec_role="duplicate"
        )
        original = graph._insert_raw(specs, callables, priority, name)

        select = None
        if out_pairs:
            select_specs = [
                AccessSpec(AccessMode.READ, orig)
                for orig, _ in (epoch.protected[h] for h in sorted(epoch.protected))
            ]
            select_specs += [
                AccessSpec(AccessMode.READ, hidden) for _, hidden in out_pairs
            ]
            select_specs += [
                AccessSpec(AccessMode.WRITE, orig) for orig, _ in out_pairs
            ]
            select = graph._insert_raw(
                select_specs,
                {HOST: _select_body(epoch, out_pairs)},
                priority,
                f"{label}~select",
                spec_role="select",
            )
        pair = SpecPair(original, duplicate, select, out_pairs)
        original.spec_pair = pair
        duplicate.spec_pair = pair
        epoch.pairs.append(pair)
        return original

    # -- resolution ----------------------------------------------------------

    def resolve(self, u_task) -> None:
        """Commit or roll back; runs on U's worker before U's release."""
        with self.lock:
            epoch = u_task.epoch
            result = u_task.result
            if not isinstance(result, bool):
                raise SpeculationError(
                    f"uncertain task {u_task.label} must return a boolean "
                    f"did-write outcome, got {type(result).__name__}"
                )
            epoch.did_write = result
            if epoch.open:
                self._close_epoch(epoch)
            losers = [
                pair.original if not result else pair.duplicate
                for pair in epoch.pairs
            ]
        for task in losers:
            follow_up = task.disable()
            if follow_up == "release":
                self.graph.dispatch_ready(self.graph.core.release_access(task))

    # -- comm interlock ------------------------------------------------------

    def guard_comm(self, handle) -> None:
        with self.lock:
            epoch = self.by_handle.get(handle.hid)
            if epoch is not None and epoch.open:
                raise SpeculationError(
                    "object participates in a pending speculation; "
                    "communication on it is rejected"
                )


def _copy_body(src, dst) -> None:
    assign_value(dst, src)


def _select_body(epoch: SpecEpoch, out_pairs):
    def body(*_args):
        if epoch.did_write is False:
            for orig, hidden in out_pairs:
                assign_value(orig, hidden)

    return body
