import random

import pytest

from orbitsim.messages import Address, Header, Message, OpCode
from orbitsim.simnet import (
    EventLoop,
    FifoRecircPort,
    Link,
    RotationRecircPort,
    SimulationError,
    TraceWriter,
    make_recirc_port,
    recirc_revisit_period,
    serialization_ns,
)


def cache_msg(hkey=1, wire=1024):
    # wire_size = 42 + 22 + 6 + 4 + key + value
    key = b"k" * 16
    value = b"v" * (wire - 74 - len(key))
    m = Message(Header(OpCode.R_REP, 0, hkey, 0), key, value, Address(1), Address(2))
    assert m.wire_size() == wire
    return m


def test_equal_time_events_run_in_schedule_order():
    loop, seen = EventLoop(), []
    for i in range(5):
        loop.schedule(10.0, seen.append, i)
    loop.schedule(5.0, seen.append, "early")
    loop.run()
    assert seen == ["early", 0, 1, 2, 3, 4]


def test_scheduling_in_the_past_is_fatal():
    loop = EventLoop()
    loop.schedule(10.0, lambda _: loop.schedule(5.0, print))
    with pytest.raises(SimulationError):
        loop.run()


def test_empty_queue_stops_at_last_event():
    loop = EventLoop()
    loop.schedule(42.0, lambda _: None)
    assert loop.run(until=1000.0) == 42.0


def test_run_until_stops_clock_at_bound():
    loop = EventLoop()
    loop.schedule(5.0, lambda _: None)
    loop.schedule(2000.0, lambda _: None)
    assert loop.run(until=1000.0) == 1000.0
    assert loop.pending() == 1


def test_max_events():
    loop = EventLoop()
    for t in range(10):
        loop.schedule(float(t), lambda _: None)
    loop.run(max_events=3)
    assert loop.processed == 3


def test_link_serialization_and_propagation():
    loop, got = EventLoop(), []
    ln = Link(loop, lambda m: got.append((loop.now, m)), propagation_ns=1000.0, bandwidth_bps=100e9)
    m = cache_msg(wire=1000)
    ln.send(m, 0.0)
    ln.send(m, 0.0)  # queued behind the first
    loop.run()
    assert got[0][0] == pytest.approx(80.0 + 1000.0)
    assert got[1][0] == pytest.approx(160.0 + 1000.0)
    assert ln.delivered == 2 and ln.in_flight == 0


def test_link_fifo():
    loop, got = EventLoop(), []
    ln = Link(loop, got.append)
    big, small = cache_msg(1, 1400), cache_msg(2, 100)
    ln.send(big, 0.0)
    ln.send(small, 0.0)
    loop.run()
    assert [m.hkey for m in got] == [1, 2]


def test_link_loss_is_counted():
    loop, got = EventLoop(), []
    ln = Link(loop, got.append, loss=0.5, rng=random.Random(3))
    for _ in range(1000):
        ln.send(cache_msg(), loop.now)
    loop.run()
    assert ln.sent == ln.delivered + ln.lost
    assert 400 < ln.lost < 600
    assert ln.lost_ops == {OpCode.R_REP: ln.lost}


def test_analytic_period_serialized():
    assert recirc_revisit_period(1, 1024, serialized=True) == pytest.approx(400 + 81.92)
    assert recirc_revisit_period(128, 1024, serialized=True) == pytest.approx(61685.76)


def test_analytic_period_pipelined():
    ser = serialization_ns(1024, 100e9)
    assert recirc_revisit_period(1, 1024) == pytest.approx(ser + 400)
    assert recirc_revisit_period(128, 1024) == pytest.approx(128 * ser)


def test_analytic_period_needs_a_packet():
    with pytest.raises(ValueError):
        recirc_revisit_period(0, 64)


def measured_period(port_cls, count, serialized, horizon=2e6):
    loop = EventLoop()
    port = port_cls(loop, serialized=serialized)
    visits = {}

    def visit(pkt):
        visits.setdefault(pkt.pid, []).append(loop.now)
        port.wake(pkt)  # keep the rotation model visiting every pass
        return True

    port.visit = visit
    for i in range(count):
        port.add(cache_msg(hkey=i), 0.0)
    loop.run(until=horizon)
    gaps = []
    for times in visits.values():
        tail = times[len(times) // 2:]
        gaps += [b - a for a, b in zip(tail, tail[1:])]
    return sum(gaps) / len(gaps)


@pytest.mark.parametrize("count", [1, 16, 128])
def test_fifo_measured_period_matches_model_serialized(count):
    want = recirc_revisit_period(count, 1024, serialized=True)
    assert measured_period(FifoRecircPort, count, True) == pytest.approx(want, rel=0.05)


@pytest.mark.parametrize("count", [1, 16, 128])
def test_fifo_measured_period_matches_model_pipelined(count):
    want = recirc_revisit_period(count, 1024)
    assert measured_period(FifoRecircPort, count, False) == pytest.approx(want, rel=0.05)


@pytest.mark.parametrize("serialized", [True, False])
def test_rotation_agrees_with_fifo_oracle(serialized):
    for count in (8, 64):
        fifo = measured_period(FifoRecircPort, count, serialized)
        rot = measured_period(RotationRecircPort, count, serialized)
        assert rot == pytest.approx(fifo, rel=0.01)


def test_doubling_population_doubles_period():
    p64 = measured_period(FifoRecircPort, 64, True)
    p128 = measured_period(FifoRecircPort, 128, True)
    assert p128 / p64 == pytest.approx(2.0, rel=0.05)


def test_idle_packets_keep_population():
    loop = EventLoop()
    port = FifoRecircPort(loop)
    port.visit = lambda p: True
    for i in range(12):
        port.add(cache_msg(hkey=i), 0.0)
    loop.run(until=1e5)
    assert port.population == 12
    assert all(p.visits > 10 for p in port.packets.values())


def test_requests_are_refused_by_recirc_port():
    loop = EventLoop()
    port = make_recirc_port("rotation", loop)
    for op in (OpCode.R_REQ, OpCode.W_REQ, OpCode.CRN_REQ, OpCode.F_REQ):
        m = cache_msg().evolve(header=Header(op, 0, 1, 0))
        with pytest.raises(SimulationError):
            port.add(m, 0.0)
    assert port.request_violations == 4
    assert port.population == 0


def test_population_ledger():
    loop = EventLoop()
    port = make_recirc_port("fifo", loop)
    dropped = set()

    def visit(pkt):
        if pkt.msg.hkey in dropped:
            port.remove(pkt, "invalid")
            return False
        return True

    port.visit = visit
    for i in range(10):
        port.add(cache_msg(hkey=i), 0.0, "validate")
    loop.run(until=1e4)
    dropped.update({1, 2, 3})
    loop.run(until=2e4)
    assert port.population == 7
    assert port.added == {"validate": 10} and port.removed == {"invalid": 3}
    assert port.ledger_balanced()


def test_period_tracks_max_after_removal():
    loop = EventLoop()
    port = RotationRecircPort(loop)
    port.visit = lambda p: True
    big = port.add(cache_msg(1, 1500), 0.0)
    port.add(cache_msg(2, 100), 0.0)
    port.remove(big, "evicted")
    assert port.max_ser == pytest.approx(serialization_ns(100, 100e9))
    assert port.period() == pytest.approx(serialization_ns(100, 100e9) + 400)


def test_unknown_model():
    with pytest.raises(ValueError):
        make_recirc_port("nope", EventLoop())


def test_trace_writer(tmp_path):
    tw = TraceWriter(tmp_path / "t.jsonl")
    tw.write({"b": 1, "a": 2})
    tw.close()
    assert (tmp_path / "t.jsonl").read_text() == '{"a":2,"b":1}\n'
