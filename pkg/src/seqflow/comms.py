"""Communication tasks between runtime instances.

Send, receive, and broadcast are inserted into a task graph like any other
task (send reads the object, receive writes it) but are executed by one
background agent per instance instead of the worker pool, so workers never
wait inside a transport call.  The reference transport is an in-process
universe of W instances exchanging byte messages over ordered per-pair
channels with an injectable visibility delay.

Wire protocol, two parts per message: a 16-byte header (4-byte little-endian
tag, 4-byte little-endian source rank, 8-byte little-endian payload size)
followed by the payload bytes as a second channel message.

Serialization resolves each object to exactly one tier:
explicit serializer protocol, then contiguous writable buffer, then the
trivially copyable Cell scalars.
"""

from __future__ import annotations

import logging
import struct
import threading
import time
from collections import deque

from .access import AccessMode, AccessSpec
from .cell import Cell, format_for
from .errors import (
    CommProtocolError,
    ConfigurationError,
    SerializationError,
)
from .scheduler import HOST
from .trace import AGENT_ID

log = logging.getLogger("seqflow")

_HEADER = struct.Struct("<iiQ")
_BCAST_FLAG = 1 << 30
_MAX_TAG = _BCAST_FLAG


# -- serialization tiers -----------------------------------------------------


class Serializer:
    """Field-by-field stream builder: (name length, name, field length, bytes)."""

    def __init__(self):
        self._parts = []

    def append(self, value, name: str) -> None:
        if isinstance(value, bool):
            data = struct.pack("<?", value)
        elif isinstance(value, int):
            data = struct.pack("<q", value)
        elif isinstance(value, float):
            data = struct.pack("<d", value)
        elif isinstance(value, str):
            data = value.encode("utf-8")
        elif isinstance(value, (bytes, bytearray, memoryview)):
            data = bytes(value)
        else:
            try:
                data = memoryview(value).tobytes()
            except TypeError:
                raise SerializationError(
                    f"field {name!r}: cannot serialize {type(value).__name__}"
                ) from None
        encoded_name = name.encode("utf-8")
        if len(encoded_name) > 0xFFFF:
            raise SerializationError(f"field name {name!r} is too long")
        self._parts.append(
            struct.pack("<H", len(encoded_name))
            + encoded_name
            + struct.pack("<Q", len(data))
            + data
        )

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Deserializer:
    """Ordered reader over a serializer stream; names are verified."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def _next_field(self, name: str) -> bytes:
        data, pos = self._data, self._pos
        if pos + 2 > len(data):
            raise SerializationError(f"stream exhausted before field {name!r}")
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        stored = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if stored != name:
            raise SerializationError(
                f"field order mismatch: expected {name!r}, stream has {stored!r}"
            )
        if pos + 8 > len(data):
            raise SerializationError(f"truncated length for field {name!r}")
        (size,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        field = data[pos : pos + size]
        if len(field) != size:
            raise SerializationError(f"truncated payload for field {name!r}")
        self._pos = pos + size
        return field

    def read_int(self, name: str) -> int:
        return struct.unpack("<q", self._next_field(name))[0]

    def read_bool(self, name: str) -> bool:
        return struct.unpack("<?", self._next_field(name))[0]

    def read_float(self, name: str) -> float:
        return struct.unpack("<d", self._next_field(name))[0]

    def read_str(self, name: str) -> str:
        return self._next_field(name).decode("utf-8")

    def read_bytes(self, name: str) -> bytes:
        return self._next_field(name)


TIER_SERIALIZER = "serializer"
TIER_BUFFER = "buffer"
TIER_TRIVIAL = "trivial"


def resolve_tier(obj) -> str:
    if hasattr(obj, "serialize") and hasattr(obj, "deserialize"):
        return TIER_SERIALIZER
    try:
        view = memoryview(obj)
    except TypeError:
        view = None
    if view is not None:
        if view.readonly or not view.contiguous:
            raise SerializationError(
                f"{type(obj).__name__}: buffer tier needs a writable "
                "contiguous buffer"
            )
        return TIER_BUFFER
    if isinstance(obj, Cell):
        return TIER_TRIVIAL
    raise SerializationError(
        f"{type(obj).__name__} resolves to no serialization tier: provide "
        "serialize(serializer)/deserialize(deserializer), a writable buffer, "
        "or use a Cell"
    )


def encode_payload(obj) -> bytes:
    tier = resolve_tier(obj)
    if tier == TIER_SERIALIZER:
        serializer = Serializer()
        obj.serialize(serializer)
        return serializer.getvalue()
    if tier == TIER_BUFFER:
        return memoryview(obj).tobytes()
    return struct.pack(format_for(obj.value), obj.value)


def decode_payload(obj, data: bytes) -> None:
    tier = resolve_tier(obj)
    if tier == TIER_SERIALIZER:
        obj.deserialize(Deserializer(data))
        return
    if tier == TIER_BUFFER:
        view = memoryview(obj).cast("B")
        if view.nbytes != len(data):
            raise CommProtocolError(
                f"received {len(data)} bytes for a {view.nbytes}-byte buffer"
            )
        view[:] = data
        return
    fmt = format_for(obj.value)
    if struct.calcsize(fmt) != len(data):
        raise CommProtocolError(
            f"received {len(data)} bytes for a {struct.calcsize(fmt)}-byte scalar"
        )
    (value,) = struct.unpack(fmt, data)
    obj.value = bool(value) if fmt == "<?" else value


# -- transport ---------------------------------------------------------------


class _Channel:
    """Ordered messages from one rank to another with delayed visibility."""

    __slots__ = ("src", "dst", "messages", "last_visible")

    def __init__(self, src: int, dst: int):
        self.src = src
        self.dst = dst
        self.messages = deque()  # (visible_at, bytes)
        self.last_visible = 0.0


class InProcessUniverse:
    """W runtime instances in one process, wired with ordered channels.

    ``set_delay`` installs a callable (src, dst, nbytes) -> seconds applied to
    message visibility; visibility stays monotonic per channel so order is
    preserved under any delay function.
    """

    def __init__(self, size: int, max_message_size: int = 64 << 20,
                 debug_broadcast: bool = False):
        if size < 1:
            raise ConfigurationError("communicator size must be at least 1")
        self.size = size
        self.max_message_size = max_message_size
        self.debug_broadcast = debug_broadcast
        self._lock = threading.Lock()
        self._delay = None
        self._channels = {
            (src, dst): _Channel(src, dst)
            for src in range(size)
            for dst in range(size)
            if src != dst
        }
        self.instances = [CommInstance(self, rank) for rank in range(size)]

    def instance(self, rank: int) -> "CommInstance":
        return self.instances[rank]

    def set_delay(self, fn) -> None:
        with self._lock:
            self._delay = fn

    def shutdown(self) -> None:
        for inst in self.instances:
            inst.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.shutdown()
        return False

    # -- agent-only entry points --------------------------------------------

    def put(self, src: int, dst: int, data: bytes) -> None:
        now = time.monotonic()
        with self._lock:
            channel = self._channels[(src, dst)]
            delay = self._delay(src, dst, len(data)) if self._delay else 0.0
            visible = max(now + delay, channel.last_visible)
            channel.last_visible = visible
            channel.messages.append((visible, data))
        self.instances[dst].agent.kick()

    def drain_visible(self, dst: int):
        """Pop every currently visible message for dst; returns (src, bytes)."""
        now = time.monotonic()
        out = []
        deadline = None
        with self._lock:
            for src in range(self.size):
                if src == dst:
                    continue
                channel = self._channels[(src, dst)]
                while channel.messages and channel.messages[0][0] <= now:
                    out.append((src, channel.messages.popleft()[1]))
                if channel.messages:
                    head = channel.messages[0][0]
                    deadline = head if deadline is None else min(deadline, head)
        return out, deadline


# -- instance and agent ------------------------------------------------------


class CommOp:
    __slots__ = ("kind", "obj", "peer", "tag", "wire_tag", "debug_seq")

    def __init__(self, kind, obj, peer, tag, wire_tag=None, debug_seq=None):
        self.kind = kind  # send | recv | bcast_root | bcast_recv
        self.obj = obj
        self.peer = peer
        self.tag = tag
        self.wire_tag = tag if wire_tag is None else wire_tag
        self.debug_seq = debug_seq


class _PendingRecv:
    __slots__ = ("task", "src", "wire_tag")

    def __init__(self, task, src, wire_tag):
        self.task = task
        self.src = src
        self.wire_tag = wire_tag


class CommAgent:
    """The only thread of an instance allowed to touch the transport."""

    def __init__(self, instance: "CommInstance"):
        self.instance = instance
        self._cond = threading.Condition(threading.Lock())
        self._inbox = deque()
        self._stop = False
        self.wakeups = 0
        self._pending = []  # _PendingRecv, post order
        self._unexpected = {}  # (src, wire_tag) -> deque of payloads
        self._half = {}  # src -> (wire_tag, announced size) awaiting payload
        self.thread = threading.Thread(
            target=self._loop,
            name=f"seqflow-comm-agent-r{instance.rank}",
            daemon=True,
        )
        self.thread.start()

    def submit(self, task) -> None:
        """Hand a slot-active communication task to the agent (any thread)."""
        with self._cond:
            self._inbox.append(task)
            self._cond.notify()

    def kick(self) -> None:
        with self._cond:
            self._cond.notify()

    def stop(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify()
        self.thread.join()
        if self._pending or self._inbox:
            log.warning(
                "comm instance %d stopped with %d pending receive(s) and %d "
                "unposted task(s)",
                self.instance.rank,
                len(self._pending),
                len(self._inbox),
            )

    # -- loop ---------------------------------------------------------------

    def _loop(self):
        from .engine import set_context_id

        set_context_id(AGENT_ID)
        universe = self.instance.universe
        while True:
            with self._cond:
                stop = self._stop
                batch = list(self._inbox)
                self._inbox.clear()
            if stop:
                return
            for task in batch:
                try:
                    self._post(task)
                except BaseException as exc:  # noqa: BLE001
                    task.error = exc
                    self._poison(task.graph, exc)
            arrived, deadline = universe.drain_visible(self.instance.rank)
            for src, data in arrived:
                try:
                    self._incoming(src, data)
                except BaseException as exc:  # noqa: BLE001
                    self._poison(None, exc)
            with self._cond:
                if self._stop or self._inbox:
                    continue
                self.wakeups += 1
                if deadline is None:
                    self._cond.wait()
                else:
                    self._cond.wait(timeout=max(deadline - time.monotonic(), 0.0))

    def _poison(self, graph, exc) -> None:
        graphs = [graph] if graph is not None else self.instance.graphs
        for g in graphs:
            if g.engine is not None:
                g.engine.poison(exc)
            else:
                g.fail(exc)

    # -- posting ------------------------------------------------------------

    def _post(self, task) -> None:
        op = task.comm_op
        trace = task.graph.trace
        trace.comm_posted(AGENT_ID, task)
        if op.kind == "send":
            self._post_send(op, op.peer)
            self._complete(task)
        elif op.kind == "bcast_root":
            for dst in range(self.instance.universe.size):
                if dst != self.instance.rank:
                    self._post_send(op, dst)
            self._complete(task)
        elif op.kind in ("recv", "bcast_recv"):
            queue = self._unexpected.get((op.peer, op.wire_tag))
            if queue:
                payload = queue.popleft()
                if not queue:
                    del self._unexpected[(op.peer, op.wire_tag)]
                self._finish_recv(task, payload)
            else:
                self._pending.append(_PendingRecv(task, op.peer, op.wire_tag))
        else:
            raise CommProtocolError(f"unknown comm op {op.kind!r}")

    def _post_send(self, op: CommOp, dst: int) -> None:
        payload = encode_payload(op.obj)
        if op.debug_seq is not None:
            payload = struct.pack("<I", op.debug_seq) + payload
        universe = self.instance.universe
        if len(payload) > universe.max_message_size:
            raise CommProtocolError(
                f"payload of {len(payload)} bytes exceeds the "
                f"{universe.max_message_size}-byte limit"
            )
        header = _HEADER.pack(op.wire_tag, self.instance.rank, len(payload))
        universe.put(self.instance.rank, dst, header)
        universe.put(self.instance.rank, dst, payload)

    # -- receiving ----------------------------------------------------------

    def _incoming(self, src: int, data: bytes) -> None:
        half = self._half.pop(src, None)
        if half is None:
            if len(data) != _HEADER.size:
                raise CommProtocolError(
                    f"expected a {_HEADER.size}-byte header from rank {src}, "
                    f"got {len(data)} bytes"
                )
            wire_tag, src_field, size = _HEADER.unpack(data)
            if src_field != src:
                raise CommProtocolError(
                    f"header names source {src_field} on the channel from {src}"
                )
            if size > self.instance.universe.max_message_size:
                raise CommProtocolError(
                    f"announced size {size} exceeds the configured maximum"
                )
            self._half[src] = (wire_tag, size)
            return
        wire_tag, size = half
        if len(data) != size:
            raise CommProtocolError(
                f"payload of {len(data)} bytes does not match announced {size}"
            )
        for i, pending in enumerate(self._pending):
            if pending.src == src and pending.wire_tag == wire_tag:
                del self._pending[i]
                self._finish_recv(pending.task, data)
                return
        self._unexpected.setdefault((src, wire_tag), deque()).append(data)

    def _finish_recv(self, task, payload: bytes) -> None:
        op = task.comm_op
        if op.debug_seq is not None:
            if len(payload) < 4:
                raise CommProtocolError("broadcast payload lost its sequence tag")
            (seq,) = struct.unpack_from("<I", payload)
            if seq != op.debug_seq:
                raise CommProtocolError(
                    f"broadcast sequence divergence: instance {self.instance.rank} "
                    f"expected {op.debug_seq}, root sent {seq}"
                )
            payload = payload[4:]
        decode_payload(op.obj, payload)
        self._complete(task)

    def _complete(self, task) -> None:
        graph = task.graph
        if not task.try_claim():
            return
        task.finish(None)
        graph.trace.comm_complete(AGENT_ID, task)
        graph.dispatch_ready(graph.core.release_access(task))


class CommInstance:
    """One rank of the communicator; owns the agent and a broadcast counter."""

    def __init__(self, universe: InProcessUniverse, rank: int):
        self.universe = universe
        self.rank = rank
        self.graphs = []
        self.context_violations = 0
        self._bcast_seq = 0
        self.agent = CommAgent(self)

    def adopt(self, graph) -> None:
        self.graphs.append(graph)

    def next_bcast_seq(self) -> int:
        seq = self._bcast_seq
        self._bcast_seq += 1
        return seq

    def stop(self) -> None:
        self.agent.stop()


# -- insertion entry points --------------------------------------------------


def _comm_precheck(graph, obj, peer: int, tag: int):
    instance = graph.comm
    if instance is None:
        raise ConfigurationError(
            "bind the graph to a communicator with use_comm before "
            "inserting communication tasks"
        )
    if not 0 <= peer < instance.universe.size:
        raise ConfigurationError(
            f"rank {peer} outside communicator of size {instance.universe.size}"
        )
    if not 0 <= tag < _MAX_TAG:
        raise ConfigurationError(f"tag must be in [0, {_MAX_TAG}), got {tag}")
    resolve_tier(obj)  # unresolvable tier fails at insertion
    handle = graph.registry.ensure(obj)
    if graph._speculation is not None:
        graph._speculation.guard_comm(handle)
    handle.comm_used = True
    return instance


def _check_context(instance: CommInstance) -> None:
    # transport safety bookkeeping: a worker context must never get here
    from .engine import current_worker_id

    if current_worker_id() >= 0:
        instance.context_violations += 1


def comm_send(graph, obj, dest: int, tag: int):
    from .task import TaskViewer

    instance = _comm_precheck(graph, obj, dest, tag)
    _check_context(instance)
    op = CommOp("send", obj, dest, tag)
    task = graph._insert_raw(
        [AccessSpec(AccessMode.READ, obj)],
        {},
        0,
        f"send->r{dest}#{tag}",
        comm_op=op,
    )
    return TaskViewer(task)


def comm_recv(graph, obj, src: int, tag: int):
    from .task import TaskViewer

    instance = _comm_precheck(graph, obj, src, tag)
    _check_context(instance)
    op = CommOp("recv", obj, src, tag)
    task = graph._insert_raw(
        [AccessSpec(AccessMode.WRITE, obj)],
        {},
        0,
        f"recv<-r{src}#{tag}",
        comm_op=op,
    )
    return TaskViewer(task)


def comm_broadcast(graph, obj, root: int):
    from .task import TaskViewer

    instance = _comm_precheck(graph, obj, root, 0)
    _check_context(instance)
    seq = instance.next_bcast_seq()
    # one constant hidden tag: instances that disagree on the broadcast
    # count still pair up on the wire, which is what lets the debug
    # sequence check observe the divergence instead of hanging
    wire_tag = _BCAST_FLAG
    debug_seq = seq if instance.universe.debug_broadcast else None
    if instance.universe.size == 1:
        task = graph._insert_raw(
            [AccessSpec(AccessMode.READ, obj)],
            {HOST: lambda _obj: None},
            0,
            f"bcast#{seq}",
        )
        return TaskViewer(task)
    if instance.rank == root:
        op = CommOp("bcast_root", obj, root, 0, wire_tag, debug_seq)
        access = AccessSpec(AccessMode.READ, obj)
    else:
        op = CommOp("bcast_recv", obj, root, 0, wire_tag, debug_seq)
        access = AccessSpec(AccessMode.WRITE, obj)
    task = graph._insert_raw([access], {}, 0, f"bcast#{seq}", comm_op=op)
    return TaskViewer(task)
