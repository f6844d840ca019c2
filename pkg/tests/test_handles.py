"""Slot grouping, readiness counting, guards, and release on the raw core."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqflow.access import AccessMode, SlotCategory, category_of
from seqflow.errors import InternalConsistencyError, RegistrationError
from seqflow.handles import DependencyCore, HandleRegistry
from seqflow.task import ResolvedAccess, Task


def make_core():
    registry = HandleRegistry()
    released = []
    return registry, DependencyCore(registry, released.append), released


def fresh_task():
    return Task(None, {"host": lambda: None})


def append(core, handle, mode, task):
    rec = ResolvedAccess(mode)
    core.append_access(handle, mode, task, rec)
    task.accesses.append(rec)
    return rec


def reference_grouping(modes):
    """Maximal runs of one grouping category; exclusive accesses stand alone."""
    slots = []
    for mode in modes:
        cat = category_of(mode)
        if slots and slots[-1][0] is cat and cat is not SlotCategory.EXCLUSIVE:
            slots[-1][1] += 1
        else:
            slots.append([cat, 1])
    return [(cat, count) for cat, count in slots]


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from(list(AccessMode)), min_size=1, max_size=40))
def test_slot_grouping_matches_reference(modes):
    registry, core, _ = make_core()
    handle = registry.ensure(object())
    for mode in modes:
        append(core, handle, mode, fresh_task())
    got = [(slot.category, len(slot.tasks)) for slot in handle.slots]
    assert got == reference_grouping(modes)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(list(AccessMode)), min_size=1, max_size=24))
def test_pending_counts_first_slot_only(modes):
    # tasks in the active first slot keep only the insertion guard
    registry, core, _ = make_core()
    handle = registry.ensure(object())
    tasks = []
    for mode in modes:
        task = fresh_task()
        append(core, handle, mode, task)
        tasks.append(task)
    for task in tasks:
        expected = 1 if task.accesses[0].slot_index == 0 else 2
        assert task.pending == expected


def run_to_release(core, task):
    assert task.dec_pending() == "ready"
    assert task.try_claim()
    task.finish(None)
    return core.release_access(task)


def test_no_join_after_slot_completed():
    registry, core, _ = make_core()
    obj = object()
    handle = registry.ensure(obj)
    t1 = fresh_task()
    append(core, handle, AccessMode.READ, t1)
    run_to_release(core, t1)
    assert handle.active_index == 1
    # the read group is over; a late read must open a fresh slot
    t2 = fresh_task()
    rec = append(core, handle, AccessMode.READ, t2)
    assert rec.slot_index == 1
    assert len(handle.slots) == 2
    assert t2.dec_pending() == "ready"


def test_release_activates_next_slot():
    registry, core, released = make_core()
    handle = registry.ensure(object())
    writer = fresh_task()
    readers = [fresh_task() for _ in range(3)]
    append(core, handle, AccessMode.WRITE, writer)
    for r in readers:
        append(core, handle, AccessMode.READ, r)
    for r in readers:
        assert r.dec_pending() is None  # still waiting on the writer slot
    ready = run_to_release(core, writer)
    assert sorted(t.tid for t in ready) == sorted(t.tid for t in readers)
    assert released == [writer]


def test_release_chain_of_disabled_tasks_drains():
    registry, core, released = make_core()
    handle = registry.ensure(object())
    first = fresh_task()
    chain = [fresh_task() for _ in range(30)]
    append(core, handle, AccessMode.WRITE, first)
    for t in chain:
        append(core, handle, AccessMode.WRITE, t)
        t.dec_pending()
        assert t.disable() == "none"
    ready = run_to_release(core, first)
    assert ready == []
    assert len(released) == len(chain) + 1


def test_double_release_detected():
    registry, core, _ = make_core()
    handle = registry.ensure(object())
    task = fresh_task()
    append(core, handle, AccessMode.WRITE, task)
    run_to_release(core, task)
    with pytest.raises(InternalConsistencyError):
        core.release_access(task)


def test_commute_guard_all_or_nothing():
    registry, core, _ = make_core()
    h1 = registry.ensure(object())
    h2 = registry.ensure(object())
    t1, t2 = fresh_task(), fresh_task()
    for h in (h1, h2):
        append(core, h, AccessMode.COMMUTATIVE_WRITE, t1)
        append(core, h, AccessMode.COMMUTATIVE_WRITE, t2)
    for t in (t1, t2):
        t.commute_handles = sorted(
            (r.handle for r in t.accesses), key=lambda h: h.hid
        )
    assert t1.dec_pending() == "ready"
    assert t2.dec_pending() == "ready"
    assert core.acquire_for_execution(t1)
    assert not core.acquire_for_execution(t2)
    # the failed attempt must not leave a half-held guard behind
    assert h1.guard_owner is t1 and h2.guard_owner is t1
    assert t1.try_claim()
    t1.finish(None)
    ready = core.release_access(t1)
    assert h1.guard_owner is None and h2.guard_owner is None
    assert t2 in ready  # the guard release re-offers the blocked member


def test_registry_generation_prevents_aliasing():
    registry = HandleRegistry()
    obj = object()
    h1 = registry.register(obj)
    registry.unregister(obj)
    h2 = registry.register(obj)
    assert h1.hid != h2.hid
    assert h1.key != h2.key


def test_registry_duplicate_and_missing():
    registry = HandleRegistry()
    obj = object()
    registry.register(obj)
    with pytest.raises(RegistrationError):
        registry.register(obj)
    with pytest.raises(RegistrationError):
        registry.unregister(object())


def test_unregister_with_pending_access_rejected():
    registry, core, _ = make_core()
    obj = object()
    handle = registry.ensure(obj)
    append(core, handle, AccessMode.WRITE, fresh_task())
    with pytest.raises(RegistrationError):
        registry.unregister(obj)


def test_element_handles_are_independent():
    registry = HandleRegistry()
    buf = [0] * 8
    h3 = registry.ensure(buf, element=3)
    h5 = registry.ensure(buf, element=5)
    whole = registry.ensure(buf)
    assert len({h3.hid, h5.hid, whole.hid}) == 3
    assert registry.ensure(buf, element=3) is h3
