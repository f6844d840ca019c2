"""Inter-instance communication: serialization tiers, matching, the agent."""

import array
import contextlib
import struct
import threading
import time

import pytest

import seqflow as sf
from seqflow.comms import (
    CommProtocolError,
    Deserializer,
    SerializationError,
    Serializer,
    decode_payload,
    encode_payload,
    resolve_tier,
)

from conftest import Matrix


@contextlib.contextmanager
def cluster(n, workers=2, **universe_kw):
    uni = sf.InProcessUniverse(n, **universe_kw)
    engines = []
    try:
        for _ in range(n):
            engines.append(sf.create_engine(sf.WorkerTeam.of_host_workers(workers)))
        graphs = [
            sf.TaskGraph().compute_on(eng).use_comm(uni.instances[r])
            for r, eng in enumerate(engines)
        ]
        yield uni, graphs
    finally:
        for eng in engines:
            eng.stop()
        uni.shutdown()


# -- serialization stream ----------------------------------------------------


def test_serializer_round_trip():
    s = Serializer()
    s.append(True, "flag")
    s.append(-12345, "count")
    s.append(2.5, "scale")
    s.append("héllo", "label")
    s.append(b"\x00\xff", "blob")
    s.append(array.array("d", [1.0, 2.0]), "vec")
    d = Deserializer(s.getvalue())
    assert d.read_bool("flag") is True
    assert d.read_int("count") == -12345
    assert d.read_float("scale") == 2.5
    assert d.read_str("label") == "héllo"
    assert d.read_bytes("blob") == b"\x00\xff"
    got = array.array("d")
    got.frombytes(d.read_bytes("vec"))
    assert got.tolist() == [1.0, 2.0]


def test_serializer_field_order_mismatch():
    s = Serializer()
    s.append(1, "first")
    d = Deserializer(s.getvalue())
    with pytest.raises(SerializationError, match="field order mismatch"):
        d.read_int("second")


def test_serializer_truncation_detected():
    s = Serializer()
    s.append(7, "x")
    data = s.getvalue()
    for cut in (1, len(data) // 2, len(data) - 1):
        with pytest.raises(SerializationError):
            Deserializer(data[:cut]).read_int("x")


def test_resolve_tier_order():
    assert resolve_tier(Matrix()) == "serializer"
    assert resolve_tier(bytearray(4)) == "buffer"
    assert resolve_tier(array.array("i", [1])) == "buffer"
    assert resolve_tier(sf.Cell(0)) == "trivial"
    with pytest.raises(SerializationError):
        resolve_tier(b"readonly")
    with pytest.raises(SerializationError):
        resolve_tier(object())


def test_payload_codec_buffer_exact_size():
    buf = bytearray(4)
    with pytest.raises(CommProtocolError):
        decode_payload(buf, b"\x01\x02")
    decode_payload(buf, b"\x01\x02\x03\x04")
    assert buf == bytearray(b"\x01\x02\x03\x04")


def test_payload_codec_trivial_bool():
    out = sf.Cell(False)
    decode_payload(out, encode_payload(sf.Cell(True)))
    assert out.value is True
    with pytest.raises(CommProtocolError):
        decode_payload(sf.Cell(0), b"\x01")  # 1 byte against an 8-byte int


def test_matrix_round_trip_is_structural():
    m = Matrix(2, 3, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    out = Matrix()
    decode_payload(out, encode_payload(m))
    assert out == m
    assert out.values is not m.values


# -- live transfers ----------------------------------------------------------


def test_transfer_each_tier():
    with cluster(2) as (uni, (g0, g1)):
        c_in, c_out = sf.Cell(41), sf.Cell(0)
        b_in, b_out = bytearray(b"ping"), bytearray(4)
        m_in = Matrix(1, 2, [9.5, -3.25])
        m_out = Matrix()
        g0.send(c_in, dest=1, tag=0)
        g0.send(b_in, dest=1, tag=1)
        g0.send(m_in, dest=1, tag=2)
        g1.recv(c_out, src=0, tag=0)
        g1.recv(b_out, src=0, tag=1)
        g1.recv(m_out, src=0, tag=2)
        assert g0.wait_all(timeout=10)
        assert g1.wait_all(timeout=10)
        assert c_out.value == 41
        assert b_out == b_in
        assert m_out == m_in
        assert all(i.context_violations == 0 for i in uni.instances)


def test_recv_orders_followups_by_dependency():
    with cluster(2) as (_, (g0, g1)):
        payload = sf.Cell(5)
        target = sf.Cell(0)
        doubled = sf.Cell(0)
        g0.send(payload, dest=1, tag=3)
        g1.recv(target, src=0, tag=3)
        g1.task(
            sf.read(target), sf.write(doubled),
            host=lambda t, d: setattr(d, "value", t.value * 2),
        )
        assert g1.wait_all(timeout=10)
        assert doubled.value == 10


def test_unexpected_message_waits_for_recv():
    with cluster(2) as (_, (g0, g1)):
        g0.send(sf.Cell(123), dest=1, tag=9)
        assert g0.wait_all(timeout=10)
        time.sleep(0.2)  # payload parks in the unexpected store
        out = sf.Cell(0)
        g1.recv(out, src=0, tag=9)
        assert g1.wait_all(timeout=10)
        assert out.value == 123


def test_same_tag_matches_in_fifo_order():
    with cluster(2) as (_, (g0, g1)):
        for v in (1, 2, 3):
            g0.send(sf.Cell(v), dest=1, tag=4)
        outs = [sf.Cell(0) for _ in range(3)]
        for out in outs:
            g1.recv(out, src=0, tag=4)
        assert g0.wait_all(timeout=10) and g1.wait_all(timeout=10)
        assert [o.value for o in outs] == [1, 2, 3]


def test_delayed_channel_completes_in_arrival_order():
    order = []
    with cluster(3) as (uni, (g0, g1, g2)):
        uni.set_delay(lambda src, dst, nbytes: 0.5 if src == 1 else 0.0)
        slow_out, fast_out = sf.Cell(0), sf.Cell(0)
        g1.send(sf.Cell(111), dest=0, tag=0)
        g2.send(sf.Cell(222), dest=0, tag=0)
        g0.recv(slow_out, src=1, tag=0)
        g0.recv(fast_out, src=2, tag=0)
        g0.task(sf.read(slow_out), host=lambda c: order.append("slow"))
        g0.task(sf.read(fast_out), host=lambda c: order.append("fast"))
        assert g0.wait_all(timeout=10)
        assert g1.wait_all(timeout=10) and g2.wait_all(timeout=10)
        assert (slow_out.value, fast_out.value) == (111, 222)
    # the undelayed channel released first even though its recv was posted last
    assert order == ["fast", "slow"]


def test_broadcast_reaches_all_ranks():
    with cluster(3) as (_, graphs):
        cells = [sf.Cell(777 if r == 0 else 0) for r in range(3)]
        for g, c in zip(graphs, cells):
            g.broadcast(c, root=0)
        for g in graphs:
            assert g.wait_all(timeout=10)
        assert [c.value for c in cells] == [777, 777, 777]


def test_broadcast_single_rank_is_local():
    with cluster(1) as (_, (g0,)):
        c = sf.Cell(5)
        g0.broadcast(c, root=0)
        assert g0.wait_all(timeout=10)
        assert c.value == 5


def test_debug_broadcast_checks_sequence_agreement():
    with cluster(2, debug_broadcast=True) as (_, graphs):
        cells = [sf.Cell(31 if r == 0 else 0) for r in range(2)]
        for g, c in zip(graphs, cells):
            g.broadcast(c, root=0)
        for g in graphs:
            assert g.wait_all(timeout=10)
        assert cells[1].value == 31


def test_debug_broadcast_flags_divergence():
    with cluster(2, debug_broadcast=True) as (uni, (g0, g1)):
        uni.instances[1].next_bcast_seq()  # desynchronize rank 1
        cells = [sf.Cell(8 if r == 0 else 0) for r in range(2)]
        g0.broadcast(cells[0], root=0)
        g1.broadcast(cells[1], root=0)
        assert g0.wait_all(timeout=10)
        with pytest.raises(sf.EngineFailedError) as info:
            g1.wait_all(timeout=10)
        assert isinstance(info.value.__cause__, CommProtocolError)
        assert "divergence" in str(info.value.__cause__)


def test_insertion_validation():
    with cluster(2) as (_, (g0, _g1)):
        with pytest.raises(sf.ConfigurationError):
            g0.send(sf.Cell(1), dest=5, tag=0)
        with pytest.raises(sf.ConfigurationError):
            g0.send(sf.Cell(1), dest=1, tag=-1)
        with pytest.raises(sf.ConfigurationError):
            g0.send(sf.Cell(1), dest=1, tag=1 << 30)
        with pytest.raises(SerializationError):
            g0.send(object(), dest=1, tag=0)


def test_comm_without_communicator_rejected(engine1):
    g = sf.TaskGraph().compute_on(engine1)
    with pytest.raises(sf.ConfigurationError):
        g.send(sf.Cell(1), dest=0, tag=0)


def test_oversized_payload_poisons():
    with cluster(2, max_message_size=64) as (_, (g0, _g1)):
        g0.send(bytearray(256), dest=1, tag=0)
        with pytest.raises(sf.EngineFailedError) as info:
            g0.wait_all(timeout=10)
        assert isinstance(info.value.__cause__, CommProtocolError)


def test_worker_context_counter_trips_when_violated():
    from seqflow.engine import current_worker_id, set_context_id

    with cluster(2) as (uni, (g0, _g1)):
        before = current_worker_id()
        set_context_id(7)
        try:
            g0.send(sf.Cell(1), dest=1, tag=0)
        finally:
            set_context_id(before)
        assert uni.instances[0].context_violations == 1
        assert g0.wait_all(timeout=10)


def test_idle_agent_parks():
    with sf.InProcessUniverse(2) as uni:
        time.sleep(0.4)
        assert all(inst.agent.wakeups <= 3 for inst in uni.instances)


def test_shutdown_warns_about_stuck_recv(caplog):
    import logging

    with caplog.at_level(logging.WARNING, logger="seqflow"):
        with cluster(2) as (_, (_g0, g1)):
            g1.recv(sf.Cell(0), src=0, tag=0)
            time.sleep(0.2)
    assert any("pending receive" in rec.message for rec in caplog.records)
