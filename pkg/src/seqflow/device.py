"""Simulated accelerator memory: arenas, movers, LRU blocks, staging.

Each simulated device is a bytearray arena plus a dedicated worker.  Objects
reach the arena through a three-method protocol (device_needed_size,
move_to_device, move_from_device); contiguous writable buffers get a built-in
adapter.  Kernels are ordinary callables receiving views of arena memory.

Arena metadata is guarded per device, and all data movement for one device
happens under that device's lock, so staging, eviction write-back, and host
coherency fetches serialize per arena.  Cross-device steps lock one arena at
a time and never nest arena locks; slot exclusion on the handle rules out two
conflicting stagings of the same object running concurrently.
"""

from __future__ import annotations

import threading

from .errors import StagingError


class Mover:
    """Byte transport for one arena, with meters for both directions."""

    def __init__(self, arena: "DeviceArena"):
        self.arena = arena
        self.bytes_to_device = 0
        self.bytes_from_device = 0
        self.copies_to_device = 0
        self.copies_from_device = 0

    def copy_host_to_device(self, block: "DeviceBlock", data) -> None:
        view = memoryview(data).cast("B")
        if len(view) > block.size:
            raise StagingError(
                f"copy of {len(view)} bytes into a {block.size}-byte block"
            )
        self.arena.buf[block.offset : block.offset + len(view)] = view
        self.bytes_to_device += len(view)
        self.copies_to_device += 1

    def copy_device_to_host(self, block: "DeviceBlock") -> bytes:
        data = bytes(self.arena.buf[block.offset : block.offset + block.size])
        self.bytes_from_device += len(data)
        self.copies_from_device += 1
        return data


class DeviceBlock:
    """One allocated span of an arena holding a staged object."""

    __slots__ = (
        "hid",
        "device",
        "offset",
        "size",
        "valid",
        "dirty",
        "stamp",
        "descriptor",
        "pins",
        "movable",
    )

    def __init__(self, hid, device, offset, size, movable):
        self.hid = hid
        self.device = device
        self.offset = offset
        self.size = size
        self.valid = False
        self.dirty = False  # device version newer than host; implies valid
        self.stamp = 0
        self.descriptor = None
        self.pins = 0
        self.movable = movable


class DeviceArena:
    """Fixed-capacity byte store with a first-fit free list and LRU eviction."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise StagingError("arena capacity must be positive")
        self.capacity = capacity
        self.buf = bytearray(capacity)
        self.free = [(0, capacity)]  # sorted (offset, size) segments
        self.blocks = {}  # hid -> DeviceBlock
        self._clock = 0

    def tick(self) -> int:
        self._clock += 1
        return self._clock

    def allocate(self, size: int):
        for i, (off, seg) in enumerate(self.free):
            if seg >= size:
                if seg == size:
                    del self.free[i]
                else:
                    self.free[i] = (off + size, seg - size)
                return off
        return None

    def release(self, offset: int, size: int) -> None:
        self.free.append((offset, size))
        self.free.sort()
        merged = []
        for off, seg in self.free:
            if merged and merged[-1][0] + merged[-1][1] == off:
                merged[-1] = (merged[-1][0], merged[-1][1] + seg)
            else:
                merged.append((off, seg))
        self.free = [tuple(seg) for seg in merged]

    def free_bytes(self) -> int:
        return sum(size for _, size in self.free)


class DeviceView:
    """What a device callable receives in place of the host object."""

    __slots__ = ("device", "offset", "size", "descriptor", "data", "mode")

    def __init__(self, device, block: DeviceBlock, arena: DeviceArena, mode):
        self.device = device
        self.offset = block.offset
        self.size = block.size
        self.descriptor = block.descriptor
        self.data = memoryview(arena.buf)[block.offset : block.offset + block.size]
        self.mode = mode

    def __len__(self):
        return self.size


class _ProtocolMovable:
    """Adapter over objects implementing the three-method protocol."""

    __slots__ = ("obj",)

    def __init__(self, obj):
        self.obj = obj

    def needed_size(self) -> int:
        return int(self.obj.device_needed_size())

    def to_device(self, mover, block):
        return self.obj.move_to_device(mover, block)

    def from_device(self, mover, block, descriptor):
        self.obj.move_from_device(mover, block, descriptor)


class _BufferMovable:
    """Adapter over contiguous writable buffers (bytearray, arrays, ...)."""

    __slots__ = ("obj",)

    def __init__(self, obj):
        self.obj = obj

    def needed_size(self) -> int:
        return memoryview(self.obj).nbytes

    def to_device(self, mover, block):
        mover.copy_host_to_device(block, memoryview(self.obj).cast("B"))
        return None

    def from_device(self, mover, block, descriptor):
        data = mover.copy_device_to_host(block)
        memoryview(self.obj).cast("B")[: len(data)] = data


def movable_adapter(obj):
    if (
        hasattr(obj, "device_needed_size")
        and hasattr(obj, "move_to_device")
        and hasattr(obj, "move_from_device")
    ):
        return _ProtocolMovable(obj)
    try:
        view = memoryview(obj)
    except TypeError:
        raise StagingError(
            f"{type(obj).__name__} is not device-movable: implement "
            "device_needed_size/move_to_device/move_from_device or expose a "
            "writable contiguous buffer"
        ) from None
    if view.readonly or not view.contiguous:
        raise StagingError(
            f"{type(obj).__name__} exposes a buffer but it is not writable "
            "and contiguous"
        )
    return _BufferMovable(obj)


class DeviceDomain:
    """Arena, mover, and lock for one simulated device."""

    def __init__(self, index: int, capacity: int):
        self.index = index
        self.arena = DeviceArena(capacity)
        self.mover = Mover(self.arena)
        self.lock = threading.Lock()

    # -- internal, self.lock held -------------------------------------------

    def evict_victims(self, needed: int) -> int:
        """Evict least-recently-stamped unpinned blocks until needed fits.

        Ties on the stamp fall to the lower handle id.  Returns freed bytes.
        """
        freed = 0
        while self.arena.free_bytes() < needed:
            victims = [b for b in self.arena.blocks.values() if b.pins == 0]
            if not victims:
                raise StagingError(
                    f"device {self.index}: need {needed} bytes but every "
                    "block is pinned by a running task"
                )
            victim = min(victims, key=lambda b: (b.stamp, b.hid))
            self.drop_block(victim, write_back=True)
            freed += victim.size
        return freed

    def drop_block(self, block: DeviceBlock, write_back: bool) -> None:
        if block.dirty and write_back:
            block.movable.from_device(self.mover, block, block.descriptor)
        block.dirty = False
        block.valid = False
        del self.arena.blocks[block.hid]
        self.arena.release(block.offset, block.size)

    def ensure_block(self, handle, movable) -> DeviceBlock:
        size = movable.needed_size()
        if size > self.arena.capacity:
            raise StagingError(
                f"device {self.index}: object of {size} bytes exceeds the "
                f"{self.arena.capacity}-byte arena"
            )
        block = self.arena.blocks.get(handle.hid)
        if block is not None and block.size < size:
            # object grew since last staging; restage from scratch
            self.drop_block(block, write_back=True)
            block = None
        if block is None:
            if self.arena.free_bytes() < size:
                self.evict_victims(size)
            offset = self.arena.allocate(size)
            while offset is None:
                # free bytes suffice but are fragmented; keep evicting in
                # LRU order until a hole fits or nothing evictable remains
                victims = [b for b in self.arena.blocks.values() if b.pins == 0]
                if not victims:
                    raise StagingError(
                        f"device {self.index}: fragmentation and pinned "
                        f"blocks prevent a {size}-byte allocation"
                    )
                victim = min(victims, key=lambda b: (b.stamp, b.hid))
                self.drop_block(victim, write_back=True)
                offset = self.arena.allocate(size)
            block = DeviceBlock(handle.hid, self.index, offset, size, movable)
            self.arena.blocks[handle.hid] = block
        return block


class DeviceRealm:
    """All device domains of one engine, plus the coherency steps."""

    def __init__(self, indexes, capacity: int):
        self.domains = {i: DeviceDomain(i, capacity) for i in indexes}

    def domain(self, index: int) -> DeviceDomain:
        return self.domains[index]

    def _known_devices(self, handle):
        with handle.lock:
            return sorted(handle.device_blocks)

    # -- coherency ----------------------------------------------------------

    def fetch_home(self, handle) -> None:
        """Bring the freshest copy of handle back to the host object.

        At most one copy is dirty at a time, so a single pass suffices.
        """
        for dev in self._known_devices(handle):
            domain = self.domains.get(dev)
            if domain is None:
                continue
            with domain.lock:
                block = domain.arena.blocks.get(handle.hid)
                if block is not None and block.dirty:
                    block.movable.from_device(domain.mover, block, block.descriptor)
                    block.dirty = False
                    return

    def invalidate_elsewhere(self, handle, keep_device) -> None:
        """Drop every device copy except keep_device (host write: None).

        Dirty copies must have been fetched home before this step.
        """
        for dev in self._known_devices(handle):
            if dev == keep_device:
                continue
            domain = self.domains.get(dev)
            if domain is None:
                continue
            with domain.lock:
                block = domain.arena.blocks.get(handle.hid)
                if block is not None:
                    domain.drop_block(block, write_back=False)
            with handle.lock:
                handle.device_blocks.pop(dev, None)

    # -- host-side pre-step --------------------------------------------------

    def host_coherency(self, task) -> None:
        """Run before a host callable: fetch dirty copies, invalidate on write."""
        for rec in task.accesses:
            handle = rec.handle
            if not handle.device_blocks:
                continue
            self.fetch_home(handle)
            if rec.mode.writes:
                self.invalidate_elsewhere(handle, keep_device=None)

    # -- device-side staging --------------------------------------------------

    def stage_in(self, device_index: int, task, recorder=None, worker_id=None):
        """Stage every dependency of task into device_index's arena.

        Returns (staged, views): staged is a list of (record, block) pairs
        with each block pinned; views maps handle id to the DeviceView the
        callable receives.  Runs only on the device's own worker.
        """
        domain = self.domains[device_index]
        staged = []
        views = {}
        for rec in task.accesses:
            handle = rec.handle
            movable = movable_adapter(handle.obj)
            with domain.lock:
                block = domain.arena.blocks.get(handle.hid)
                have_valid = block is not None and block.valid
            if not have_valid:
                # the freshest copy may live on another device; bring it home
                # so the host-to-device copy below reads current bytes
                self.fetch_home(handle)
            with domain.lock:
                block = domain.ensure_block(handle, movable)
                if not block.valid:
                    if recorder is not None:
                        recorder.stage_begin(worker_id, task, handle.hid)
                    block.descriptor = movable.to_device(domain.mover, block)
                    block.valid = True
                    if recorder is not None:
                        recorder.stage_end(worker_id, task, handle.hid)
                block.stamp = domain.arena.tick()
                block.pins += 1
                view = DeviceView(device_index, block, domain.arena, rec.mode)
            with handle.lock:
                handle.device_blocks[device_index] = block
            if rec.mode.writes:
                # this device is about to own the newest version
                self.invalidate_elsewhere(handle, keep_device=device_index)
            staged.append((rec, block))
            views[handle.hid] = view
        return staged, views

    def stage_out(self, device_index: int, task, staged) -> None:
        """Unpin staged blocks; write-mode blocks become the dirty copy."""
        domain = self.domains[device_index]
        with domain.lock:
            for rec, block in staged:
                block.pins -= 1
                if rec.mode.writes:
                    block.dirty = True
