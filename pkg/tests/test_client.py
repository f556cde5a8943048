import numpy as np
import pytest

from orbitsim.client import SEQ_SPACE, Client, LatencyRecorder, PendingList
from orbitsim.messages import Address, Header, Message, Meta, OpCode
from orbitsim.simnet import EventLoop, SimulationError
from orbitsim.workloads import Workload


def make_client(rate=1e6, stop_ns=float("inf"), write_ratio=0.0, n_keys=1000):
    loop = EventLoop()
    sent = []
    wl = Workload(n_keys=n_keys, write_ratio=write_ratio, n_servers=4)
    c = Client(loop, 0, Address(100000, 5000), wl, rate=rate,
               send=lambda m, at: sent.append(m), server_address=lambda s: Address(1000 + s),
               seed=3, stop_ns=stop_ns)
    return loop, c, sent, wl


def reply_to(req, key=None, value=None, op=OpCode.R_REP, cached=1):
    key = req.key if key is None else key
    value = key + b"|v0|" if value is None else value
    return Message(Header(op, req.seq, req.hkey, 0), key, value, req.dst, req.src, Meta(cached, 0, 0))


def test_seq_wraps_at_32_bits():
    pl = PendingList(start_seq=SEQ_SPACE - 2)
    seqs = [pl.register(b"k", OpCode.R_REQ, 0.0) for _ in range(4)]
    assert seqs == [SEQ_SPACE - 2, SEQ_SPACE - 1, 0, 1]


def test_seq_reuse_while_outstanding_is_fatal():
    pl = PendingList(start_seq=0)
    pl.register(b"k", OpCode.R_REQ, 0.0)
    pl.next_seq = 0
    with pytest.raises(SimulationError):
        pl.register(b"k", OpCode.R_REQ, 0.0)


def test_poisson_mean_interarrival():
    _, c, _, _ = make_client(rate=1e6)
    gaps = np.array([c._gap() for _ in range(1_000_000)])
    assert gaps.mean() == pytest.approx(1000.0, rel=0.02)


def test_stop_time_halts_generation():
    loop, c, sent, _ = make_client(rate=1e6, stop_ns=100_000)
    loop.run(until=1e6)
    assert 50 < len(sent) < 160
    assert c.stats.sent == len(sent) == c.outstanding


def test_write_ratio_of_generated_ops():
    loop, c, sent, _ = make_client(rate=1e6, stop_ns=2e7, write_ratio=0.3)
    loop.run(until=3e7)
    frac = sum(m.op == OpCode.W_REQ for m in sent) / len(sent)
    assert frac == pytest.approx(0.3, abs=0.02)
    assert all(m.value.startswith(m.key + b"|c0s") for m in sent if m.op == OpCode.W_REQ)


def test_matching_reply_completes_and_records_latency():
    loop, c, sent, _ = make_client()
    c.issue(5, False, 0.0)
    req = sent[-1]
    loop.now = 7000.0
    c.receive(reply_to(req))
    assert c.outstanding == 0 and c.stats.completed == 1
    assert c.latency.percentile("cached-read", 50) == pytest.approx(7.0)


def test_key_mismatch_sends_correction_with_same_seq():
    loop, c, sent, wl = make_client()
    c.issue(5, False, 0.0)
    req = sent[-1]
    c.receive(reply_to(req, key=b"0000000000000999"))
    crn = sent[-1]
    assert crn.op == OpCode.CRN_REQ and crn.seq == req.seq and crn.key == req.key
    assert crn.dst == req.dst
    assert c.outstanding == 1 and c.stats.corrections == 1
    c.receive(reply_to(req, cached=0))
    assert c.outstanding == 0 and c.stats.wrong_value == 0


def test_unknown_seq_is_spurious():
    loop, c, sent, _ = make_client()
    c.issue(1, False, 0.0)
    req = sent[-1]
    c.receive(reply_to(req))
    c.receive(reply_to(req))  # duplicate
    assert c.stats.spurious == 1 and c.stats.completed == 1


def test_wrong_reply_type_is_spurious():
    loop, c, sent, _ = make_client()
    c.issue(1, True, 0.0)
    c.receive(reply_to(sent[-1], op=OpCode.R_REP))
    assert c.stats.spurious == 1 and c.outstanding == 1


def test_latency_classes_and_report():
    loop, c, sent, _ = make_client()
    c.issue(1, False, 0.0)
    c.issue(2, True, 0.0)
    loop.now = 2000.0
    c.receive(reply_to(sent[0], cached=0))
    c.receive(reply_to(sent[1], op=OpCode.W_REP, value=b"", cached=0))
    rep = c.report()
    assert rep["server-read_median_us"] == pytest.approx(2.0)
    assert "server-write_p99_us" in rep


def test_latency_reservoir_caps_memory():
    lr = LatencyRecorder(capacity=100, seed=1)
    for i in range(10_000):
        lr.add("x", float(i))
    assert len(lr.samples["x"]) == 100 and lr.seen["x"] == 10_000
    assert 2000 < lr.percentile("x", 50) < 8000
    assert lr.percentile("missing", 50) is None
