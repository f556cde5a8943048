"""Open-loop client with key-check collision correction and latency classes."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .messages import Address, Header, Message, OpCode, hash_key, partition
from .metrics import Recorder
from .simnet import EventLoop, SimulationError
from .workloads import Workload, ZipfGen, value_matches_key

SEQ_SPACE = 1 << 32


class Pending(NamedTuple):
    key: bytes
    op: int
    send_time: float
    item: int


class PendingList:
    def __init__(self, start_seq: int = 0) -> None:
        self.entries: dict[int, Pending] = {}
        self.next_seq = start_seq % SEQ_SPACE

    def register(self, key: bytes, op: int, now: float, item: int = -1) -> int:
        if len(self.entries) >= 1 << 31:
            raise SimulationError("more than 2^31 outstanding requests; seq space would alias")
        seq = self.next_seq
        if seq in self.entries:
            raise SimulationError(f"seq {seq} reused while still outstanding")
        self.entries[seq] = Pending(key, op, now, item)
        self.next_seq = (seq + 1) % SEQ_SPACE
        return seq

    def get(self, seq: int) -> Optional[Pending]:
        return self.entries.get(seq)

    def complete(self, seq: int) -> Pending:
        return self.entries.pop(seq)

    def __len__(self) -> int:
        return len(self.entries)


class LatencyRecorder:
    """Reservoir per class; exact percentiles while under capacity."""

    def __init__(self, capacity: int = 100_000, seed: int = 0) -> None:
        self.capacity = capacity
        self.samples: dict[str, list[float]] = {}
        self.seen: dict[str, int] = {}
        self._rng = random.Random(seed)

    def add(self, cls: str, us: float) -> None:
        buf = self.samples.setdefault(cls, [])
        n = self.seen.get(cls, 0) + 1
        self.seen[cls] = n
        if len(buf) < self.capacity:
            buf.append(us)
        else:
            j = self._rng.randrange(n)
            if j < self.capacity:
                buf[j] = us

    def percentile(self, cls: str, q: float) -> Optional[float]:
        buf = self.samples.get(cls)
        if not buf:
            return None
        return float(np.percentile(np.asarray(buf), q))

    def merge(self, other: "LatencyRecorder") -> None:
        for cls, buf in other.samples.items():
            for v in buf:
                self.add(cls, v)


@dataclass
class ClientStats:
    sent: int = 0
    completed: int = 0
    corrections: int = 0
    spurious: int = 0
    wrong_value: int = 0
    reads: int = 0
    writes: int = 0


class Client:
    """Poisson open-loop generator.

    ``send(msg, at)`` is the uplink to the switch; ``server_address(sid)``
    maps a server index to its address. Requests are issued while
    ``now < stop_ns``.
    """

    def __init__(self, loop: EventLoop, client_id: int, address: Address, workload: Workload, *,
                 rate: float, send: Callable[[Message, float], None],
                 server_address: Callable[[int], Address], seed: int = 0,
                 stop_ns: float = float("inf"), start_ns: float = 0.0,
                 history=None, recorder: Optional[Recorder] = None,
                 latency: Optional[LatencyRecorder] = None, multi_packet: bool = False) -> None:
        if rate <= 0:
            raise ValueError("client rate must be positive")
        self.loop = loop
        self.cid = client_id
        self.addr = address
        self.wl = workload
        self.send = send
        self.server_address = server_address
        self.mean_gap = 1e9 / rate
        self.rng = np.random.default_rng([seed, client_id, 11])
        self.zipf = ZipfGen(workload.n_keys, workload.alpha, self.rng)
        self.stop_ns = stop_ns
        self.pending = PendingList()
        self.history = history
        self.rec = recorder or Recorder()
        self.latency = latency or LatencyRecorder(seed=client_id)
        self.stats = ClientStats()
        self.multi_packet = multi_packet
        self._parts: dict[int, dict[int, bytes]] = {}
        self._gaps: list[float] = []
        self._coins: list[float] = []
        loop.schedule(start_ns + self._gap(), self._arrival)

    def _gap(self) -> float:
        if not self._gaps:
            self._gaps = (self.rng.exponential(self.mean_gap, 4096)).tolist()[::-1]
        return self._gaps.pop()

    def _coin(self) -> float:
        if not self._coins:
            self._coins = self.rng.random(4096).tolist()[::-1]
        return self._coins.pop()

    def _arrival(self, _=None) -> None:
        now = self.loop.now
        if now >= self.stop_ns:
            return
        wl = self.wl
        item = wl.pattern.item_of(self.zipf.next(), wl.n_keys, now)
        write = wl.write_ratio > 0 and self._coin() < wl.write_ratio
        self.issue(item, write, now)
        self.loop.schedule(now + self._gap(), self._arrival)

    def issue(self, item: int, write: bool, now: float) -> int:
        key, hkey, home = self.wl.meta(item)
        op = OpCode.W_REQ if write else OpCode.R_REQ
        seq = self.pending.register(key, op, now, item)
        value = self.wl.write_value(item, self.cid, seq) if write else b""
        msg = Message(Header(op, seq, hkey, 0), key, value, self.addr, self.server_address(home))
        st = self.stats
        st.sent += 1
        if write:
            st.writes += 1
        else:
            st.reads += 1
        self.send(msg, now)
        return seq

    def receive(self, msg: Message) -> None:
        now = self.loop.now
        h = msg.header
        p = self.pending.get(h.seq)
        if p is None or h.op not in (OpCode.R_REP, OpCode.W_REP):
            self.stats.spurious += 1
            return
        if msg.key != p.key:
            self._correct(h.seq, p, now)
            return
        value = msg.value
        if self.multi_packet and h.op == OpCode.R_REP and h.flag > 1 and msg.meta.cached:
            value = self._reassemble(h.seq, h.flag, value)
            if value is None:
                return
        if p.op == OpCode.R_REQ and h.op != OpCode.R_REP or p.op == OpCode.W_REQ and h.op != OpCode.W_REP:
            self.stats.spurious += 1
            return
        self.pending.complete(h.seq)
        self.stats.completed += 1
        cached = msg.meta.cached == 1
        lat_us = (now - p.send_time) / 1e3
        kind = "read" if p.op == OpCode.R_REQ else "write"
        self.latency.add(f"{'cached' if cached else 'server'}-{kind}", lat_us)
        self.rec.hit("completed", now)
        if p.op == OpCode.R_REQ:
            if not value_matches_key(p.key, value):
                self.stats.wrong_value += 1
            if self.history is not None:
                self.history.read_served(p.key, value, p.send_time, now, "switch" if cached else "server")

    def _correct(self, seq: int, p: Pending, now: float) -> None:
        # Reply belongs to a colliding key: ask the home server directly.
        self.stats.corrections += 1
        self.rec.hit("corrections", now)
        hkey = hash_key(p.key, self.wl.hash_bits)
        home = partition(p.key, self.wl.n_servers)
        msg = Message(Header(OpCode.CRN_REQ, seq, hkey, 0), p.key, b"", self.addr,
                      self.server_address(home))
        self.send(msg, now)

    def _reassemble(self, seq: int, n: int, chunk: bytes) -> Optional[bytes]:
        parts = self._parts.setdefault(seq, {})
        parts[int.from_bytes(chunk[:2], "big")] = chunk[2:]
        if len(parts) < n:
            return None
        del self._parts[seq]
        return b"".join(parts[i] for i in range(n))

    @property
    def outstanding(self) -> int:
        return len(self.pending)

    def report(self) -> dict:
        st = self.stats
        out = {"client": self.cid, "sent": st.sent, "completed": st.completed,
               "corrections": st.corrections, "spurious": st.spurious}
        for cls in sorted(self.latency.samples):
            out[f"{cls}_median_us"] = self.latency.percentile(cls, 50)
            out[f"{cls}_p99_us"] = self.latency.percentile(cls, 99)
        return out
