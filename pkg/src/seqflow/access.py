"""Access modes and the declaration helpers used when inserting tasks.

A task declares each data object it touches together with an access mode.
The runtime derives all ordering from these declarations, so parallel
execution matches the sequential insertion order.
"""

from __future__ import annotations

import enum
from typing import Iterable

from .errors import DuplicateAccessError


class AccessMode(enum.Enum):
    READ = "read"
    WRITE = "write"
    ATOMIC_WRITE = "atomic_write"
    COMMUTATIVE_WRITE = "commutative_write"
    MAYBE_WRITE = "maybe_write"

    @property
    def writes(self) -> bool:
        return self is not AccessMode.READ


class SlotCategory(enum.Enum):
    """Grouping class of an access slot on a data handle.

    Consecutive accesses of the same grouping category share one slot and may
    proceed together once the slot activates; exclusive slots hold one task.
    """

    READ_GROUP = "read_group"
    ATOMIC_GROUP = "atomic_group"
    COMMUTE_GROUP = "commute_group"
    EXCLUSIVE = "exclusive"


_MODE_CATEGORY = {
    AccessMode.READ: SlotCategory.READ_GROUP,
    AccessMode.ATOMIC_WRITE: SlotCategory.ATOMIC_GROUP,
    AccessMode.COMMUTATIVE_WRITE: SlotCategory.COMMUTE_GROUP,
    AccessMode.WRITE: SlotCategory.EXCLUSIVE,
    AccessMode.MAYBE_WRITE: SlotCategory.EXCLUSIVE,
}


def category_of(mode: AccessMode) -> SlotCategory:
    return _MODE_CATEGORY[mode]


class AccessSpec:
    """One declared dependency: a mode plus either an object or an array view."""

    __slots__ = ("mode", "obj", "view")

    def __init__(self, mode, obj, view=None):
        self.mode = mode
        self.obj = obj
        self.view = view  # sequence of element indices, or None for whole-object

    def __repr__(self):
        if self.view is not None:
            return f"AccessSpec({self.mode.value}, view={list(self.view)!r})"
        return f"AccessSpec({self.mode.value}, {type(self.obj).__name__})"


def read(obj) -> AccessSpec:
    """The task only reads ``obj``; the callable must not mutate it."""
    return AccessSpec(AccessMode.READ, obj)


def write(obj) -> AccessSpec:
    """The task may read and write ``obj``; exclusive against everything else."""
    return AccessSpec(AccessMode.WRITE, obj)


def atomic_write(obj) -> AccessSpec:
    """Concurrent with other atomic writes; the callable must do its own locking."""
    return AccessSpec(AccessMode.ATOMIC_WRITE, obj)


def commutative_write(obj) -> AccessSpec:
    """Write whose order against other commutative writes does not matter.

    Members of one commutative group never run concurrently on the same
    object, but may run in any mutual order.
    """
    return AccessSpec(AccessMode.COMMUTATIVE_WRITE, obj)


def maybe_write(obj) -> AccessSpec:
    """The task may or may not write ``obj``.

    In a graph created with speculation enabled this triggers speculative
    duplication of successors; otherwise it behaves exactly like ``write``.
    """
    return AccessSpec(AccessMode.MAYBE_WRITE, obj)


def _array_spec(mode: AccessMode, buf, indices: Iterable[int]) -> AccessSpec:
    idx = list(indices)
    if len(set(idx)) != len(idx):
        raise DuplicateAccessError("array view selects the same index twice")
    return AccessSpec(mode, buf, view=idx)


def read_array(buf, indices) -> AccessSpec:
    """Per-element read dependencies on the selected indices of ``buf``."""
    return _array_spec(AccessMode.READ, buf, indices)


def write_array(buf, indices) -> AccessSpec:
    return _array_spec(AccessMode.WRITE, buf, indices)


def atomic_write_array(buf, indices) -> AccessSpec:
    return _array_spec(AccessMode.ATOMIC_WRITE, buf, indices)


def commutative_write_array(buf, indices) -> AccessSpec:
    return _array_spec(AccessMode.COMMUTATIVE_WRITE, buf, indices)


def maybe_write_array(buf, indices) -> AccessSpec:
    """Maybe-write on selected elements; unsupported in speculative graphs."""
    return _array_spec(AccessMode.MAYBE_WRITE, buf, indices)


class ArrayAccessor:
    """View handed to a callable for an array dependency.

    Restricts element access to the indices that were declared, so undeclared
    dependencies surface as errors instead of silent races.
    """

    def __init__(self, buf, indices):
        self._buf = buf
        self._indices = tuple(indices)
        self._allowed = frozenset(indices)

    @property
    def indices(self):
        return self._indices

    def _check(self, i):
        if i not in self._allowed:
            raise IndexError(f"index {i} was not declared in this dependency view")

    def __getitem__(self, i):
        self._check(i)
        return self._buf[i]

    def __setitem__(self, i, value):
        self._check(i)
        self._buf[i] = value

    def __iter__(self):
        return iter(self._indices)

    def __len__(self):
        return len(self._indices)
