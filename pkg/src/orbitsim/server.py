"""Rate-limited partitioned key-value server with a count-min sketch top-k."""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Callable, Optional

from .messages import (
    FLAG_NOT_FOUND,
    MAX_ITEM_BYTES,
    Address,
    Header,
    Message,
    Meta,
    OpCode,
    partition,
)
from .metrics import Recorder
from .simnet import EventLoop, SimulationError

_MERSENNE61 = (1 << 61) - 1
# (a, b) pairs for the five sketch rows: h_i(x) = ((a_i * x + b_i) mod p) mod width.
CMS_SEEDS = (
    (0x1F3D5B79A2C4E687, 0x0123456789ABCDEF),
    (0x2B7E151628AED2A6, 0x3243F6A8885A308D),
    (0x9E3779B97F4A7C15, 0x13198A2E03707344),
    (0x6A09E667F3BCC908, 0xA4093822299F31D0),
    (0xBB67AE8584CAA73B, 0x082EFA98EC4E6C89),
)


def _key_int(key: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big") % _MERSENNE61


class CountMinSketch:
    def __init__(self, width: int = 65536, depth: int = 5) -> None:
        if depth > len(CMS_SEEDS):
            raise ValueError(f"at most {len(CMS_SEEDS)} rows")
        self.width = width
        self.depth = depth
        self.rows = [[0] * width for _ in range(depth)]
        self._seeds = CMS_SEEDS[:depth]

    def _cols(self, key: bytes) -> list[int]:
        x = _key_int(key)
        w = self.width
        return [((a * x + b) % _MERSENNE61) % w for a, b in self._seeds]

    def add(self, key: bytes, n: int = 1) -> int:
        """Count ``key`` and return its new estimate."""
        est = None
        for row, col in zip(self.rows, self._cols(key)):
            v = row[col] + n
            row[col] = v
            if est is None or v < est:
                est = v
        return est

    def estimate(self, key: bytes) -> int:
        return min(row[col] for row, col in zip(self.rows, self._cols(key)))

    def reset(self) -> None:
        for row in self.rows:
            row[:] = [0] * self.width


class TopKTracker:
    """Exact candidate map of keys with the largest sketch estimates.

    Admission threshold is the smallest tracked estimate; a lazy min-heap
    finds it. Estimates only grow within a period, so heap entries can only
    be stale on the low side.
    """

    def __init__(self, capacity: int = 4096) -> None:
        self.capacity = capacity
        self.est: dict[bytes, int] = {}
        self._heap: list[tuple[int, bytes]] = []

    def offer(self, key: bytes, estimate: int) -> None:
        est = self.est
        if key in est:
            est[key] = estimate
            return
        if len(est) < self.capacity:
            est[key] = estimate
            heapq.heappush(self._heap, (estimate, key))
            return
        heap = self._heap
        while True:
            low, k = heap[0]
            cur = est[k]
            if cur == low:
                break
            heapq.heapreplace(heap, (cur, k))
        if estimate > low:
            heapq.heapreplace(heap, (estimate, key))
            del est[k]
            est[key] = estimate

    def top(self, k: int) -> list[tuple[bytes, int]]:
        return sorted(self.est.items(), key=lambda kv: (-kv[1], kv[0]))[:k]

    def reset(self) -> None:
        self.est.clear()
        self._heap.clear()


class KvStore:
    """One partition. Values missing from ``items`` come from ``factory``
    (the preloaded dataset) on first access."""

    def __init__(self, partition_id: int, n_partitions: int,
                 factory: Optional[Callable[[bytes], Optional[bytes]]] = None) -> None:
        self.partition_id = partition_id
        self.n_partitions = n_partitions
        self.items: dict[bytes, bytes] = {}
        self.factory = factory

    def owns(self, key: bytes) -> bool:
        return partition(key, self.n_partitions) == self.partition_id

    def get(self, key: bytes) -> Optional[bytes]:
        v = self.items.get(key)
        if v is None and self.factory is not None:
            v = self.factory(key)
            if v is not None:
                self.items[key] = v
        return v

    def put(self, key: bytes, value: bytes) -> None:
        self.items[key] = value


@dataclass
class ServerStats:
    rx: int = 0
    served: int = 0
    queue_drops: int = 0
    reads: int = 0
    writes: int = 0
    fetches: int = 0
    corrections: int = 0
    not_found: int = 0
    max_backlog: int = 0
    by_op: dict = field(default_factory=dict)


class StorageServer:
    """FIFO server: a request arriving at ``t`` leaves at
    ``max(t, previous departure) + 1/rate``; the reply is sent then.

    ``send(msg, at)`` is the uplink to the switch. ``history`` (optional)
    receives ``("write", key, value, t)`` tuples when writes are applied.
    """

    CLIENT_OPS = (OpCode.R_REQ, OpCode.W_REQ, OpCode.CRN_REQ)

    def __init__(self, loop: EventLoop, server_id: int, address: Address, store: KvStore, *,
                 rate: float = 100_000.0, send: Callable[[Message, float], None],
                 queue_capacity: Optional[int] = None, cms_width: int = 65536,
                 topk_capacity: int = 4096, history=None,
                 recorder: Optional[Recorder] = None, mtu_value: int = MAX_ITEM_BYTES) -> None:
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.loop = loop
        self.sid = server_id
        self.addr = address
        self.store = store
        self.gap = 1e9 / rate
        self.send = send
        self.queue_capacity = queue_capacity
        self.cms = CountMinSketch(cms_width)
        self.topk = TopKTracker(topk_capacity)
        self.history = history
        self.rec = recorder or Recorder()
        self.stats = ServerStats()
        self.period_id = 0
        self.last_departure = 0.0
        self.backlog = 0
        self.mtu_value = mtu_value
        self._rx_name = f"rx{server_id}"
        self._srv_name = f"srv{server_id}"

    def receive(self, msg: Message) -> None:
        now = self.loop.now
        if not self.store.owns(msg.key):
            raise SimulationError(f"server {self.sid} received key {msg.key!r} it does not own")
        op = msg.header.op
        if op not in (OpCode.R_REQ, OpCode.W_REQ, OpCode.F_REQ, OpCode.CRN_REQ):
            raise SimulationError(f"server {self.sid} received non-request op {op}")
        client_req = op != OpCode.F_REQ
        if client_req:
            self.stats.rx += 1
            self.rec.hit(self._rx_name, now)
        if self.queue_capacity is not None and self.backlog >= self.queue_capacity and client_req:
            self.stats.queue_drops += 1
            self.rec.hit("server_drop", now)
            return
        dep = max(now, self.last_departure) + self.gap
        self.last_departure = dep
        self.backlog += 1
        if self.backlog > self.stats.max_backlog:
            self.stats.max_backlog = self.backlog
        self.loop.schedule(dep, self._serve, msg)

    def _serve(self, msg: Message) -> None:
        now = self.loop.now
        self.backlog -= 1
        h = msg.header
        op = h.op
        key = msg.key
        st = self.stats
        st.served += 1
        self.topk.offer(key, self.cms.add(key))
        flag = 0
        if op == OpCode.W_REQ:
            st.writes += 1
            self.store.put(key, msg.value)
            if self.history is not None:
                self.history.write_applied(key, msg.value, now)
            rop = OpCode.W_REP
            flag = h.flag
            value = msg.value if h.flag == 1 else b""
        else:
            value = self.store.get(key)
            if op == OpCode.F_REQ:
                st.fetches += 1
                rop = OpCode.F_REP
                flag = 1
            else:
                rop = OpCode.R_REP
                if op == OpCode.CRN_REQ:
                    st.corrections += 1
                else:
                    st.reads += 1
            if value is None:
                st.not_found += 1
                value = b""
                flag = FLAG_NOT_FOUND
        if op != OpCode.F_REQ:
            self.rec.hit(self._srv_name, now)
        reply = Message(Header(rop, h.seq, h.hkey, flag), key, value, self.addr, msg.src,
                        Meta(0, 0, self.sid & 0xFF))
        if rop == OpCode.F_REP and len(key) + len(value) > self.mtu_value:
            for part in self._split(reply):
                self.send(part, now)
            return
        self.send(reply, now)

    def _split(self, reply: Message) -> list[Message]:
        """Multi-packet fetch reply: chunk i carries a 2-byte index prefix."""
        room = self.mtu_value - len(reply.key) - 2
        chunks = [reply.value[i:i + room] for i in range(0, len(reply.value), room)]
        n = len(chunks)
        if n > 255:
            raise SimulationError("item needs more than 255 packets")
        h = reply.header
        return [reply.evolve(header=h._replace(flag=n), value=i.to_bytes(2, "big") + c)
                for i, c in enumerate(chunks)]

    def report_topk(self, k: int) -> dict:
        if k < 1:
            raise ValueError("k must be >= 1")
        top = self.topk.top(k)
        record = {"server_id": self.sid, "period_id": self.period_id,
                  "top": [(key.hex(), count) for key, count in top]}
        self.cms.reset()
        self.topk.reset()
        self.period_id += 1
        return record
