"""OrbitCache switch data-plane logic.

``OrbitCacheDataPlane.process_packet`` is a pure per-packet decision function
over the switch tables; it returns a list of actions and never touches the
event loop. The hosting switch node (``orbitsim.switch``) turns actions into
link sends and recirculation-port operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Union

from .messages import Address, Header, Message, Meta, OpCode


# --------------------------------------------------------------------- actions

class Forward(NamedTuple):
    port: int
    msg: Message


class Drop(NamedTuple):
    reason: str
    idx: Optional[int] = None


class Recirculate(NamedTuple):
    msg: Message


class CloneMulticast(NamedTuple):
    to_client: Message
    to_recirc: Message
    port: int
    idx: Optional[int] = None


SwitchAction = Union[Forward, Drop, Recirculate, CloneMulticast]

# Drop reasons
ENQUEUED = "enqueued"
EVICTED = "evicted"
INVALID = "invalid"
UNKNOWN_OP = "unknown-op"


# ---------------------------------------------------------------- request table

class ReqMeta(NamedTuple):
    client: int
    seq: int
    l4port: int
    timestamp: float


class RequestTable:
    """Per-key circular queues packed into flat register arrays.

    Pointer arrays (``qlen``, ``front``, ``rear``) are indexed by CacheIdx;
    metadata arrays by ``ReqIdx = CacheIdx * S + offset``. ``rear`` is the
    offset of the next free slot, ``front`` the offset of the oldest entry.
    """

    def __init__(self, n_entries: int, queue_size: int = 8) -> None:
        if queue_size < 1:
            raise ValueError("queue size must be >= 1")
        self.n = n_entries
        self.S = queue_size
        self.qlen = [0] * n_entries
        self.front = [0] * n_entries
        self.rear = [0] * n_entries
        slots = n_entries * queue_size
        self.client_addr = [0] * slots
        self.seq = [0] * slots
        self.l4port = [0] * slots
        self.timestamp = [0.0] * slots
        self.enqueued = 0
        self.dequeued = 0
        self.flushed = 0

    def req_idx(self, c: int, offset: int) -> int:
        return c * self.S + offset

    def _check(self, c: int) -> None:
        if not 0 <= c < self.n:
            raise IndexError(f"CacheIdx {c} out of range")

    def enqueue(self, c: int, meta: ReqMeta) -> bool:
        self._check(c)
        if self.qlen[c] >= self.S:
            return False
        r = self.rear[c]
        i = c * self.S + r
        self.client_addr[i] = meta.client
        self.seq[i] = meta.seq
        self.l4port[i] = meta.l4port
        self.timestamp[i] = meta.timestamp
        self.rear[c] = (r + 1) % self.S
        self.qlen[c] += 1
        self.enqueued += 1
        return True

    def peek(self, c: int) -> Optional[ReqMeta]:
        self._check(c)
        if self.qlen[c] == 0:
            return None
        i = c * self.S + self.front[c]
        return ReqMeta(self.client_addr[i], self.seq[i], self.l4port[i], self.timestamp[i])

    def dequeue(self, c: int) -> Optional[ReqMeta]:
        meta = self.peek(c)
        if meta is None:
            return None
        self.front[c] = (self.front[c] + 1) % self.S
        self.qlen[c] -= 1
        self.dequeued += 1
        return meta

    def flush(self, c: int) -> int:
        self._check(c)
        n = self.qlen[c]
        self.qlen[c] = 0
        self.front[c] = self.rear[c]
        self.flushed += n
        return n

    def outstanding(self) -> int:
        return sum(self.qlen)

    def consistent(self) -> bool:
        for c in range(self.n):
            q = self.qlen[c]
            if not 0 <= q <= self.S:
                return False
            if q < self.S and q != (self.rear[c] - self.front[c]) % self.S:
                return False
            if q == self.S and self.rear[c] != self.front[c]:
                return False
        return True


# ---------------------------------------------------------------- counters

@dataclass
class CounterSnapshot:
    popularity: list[int]
    cache_hits: int
    overflow: int
    invalid_forwarded: int = 0


@dataclass
class DataPlaneConfig:
    max_cache_size: int = 128
    queue_size: int = 8
    multi_packet: bool = False
    flush_on_evict: bool = False
    # Deliberately broken variants, used to show the coherence checker bites.
    mutation: Optional[str] = None


MUTATIONS = ("skip-invalidate", "skip-drop-invalid", "validate-on-write-request")


class OrbitCacheDataPlane:
    """Lookup table, state table, request table and key counters.

    ``route(addr) -> port`` resolves forwarding ports for addresses;
    ``hooks`` receive ``(now, action, header)`` for every emitted action.
    """

    def __init__(self, config: Optional[DataPlaneConfig] = None, *,
                 route: Callable[[Address], int] = lambda a: a.node) -> None:
        self.config = config or DataPlaneConfig()
        if self.config.mutation not in (None, *MUTATIONS):
            raise ValueError(f"unknown mutation {self.config.mutation!r}")
        n = self.config.max_cache_size
        self.route = route
        self.lookup: dict[int, int] = {}
        self.hkey_at: list[Optional[int]] = [None] * n
        self.valid = [False] * n
        # Outstanding flagged writes per entry; an entry is only revalidated
        # once every write that invalidated it has replied.
        self.pending_writes = [0] * n
        self.rt = RequestTable(n, self.config.queue_size)
        self.popularity = [0] * n
        self.cache_hits = 0
        self.overflow = 0
        self.invalid_forwarded = 0
        self.served_direct = 0
        self.acked = [1] * n
        # Cache packets already admitted for a multi-packet item.
        self.parts = [0] * n
        self.diag_unknown_op = 0
        self.stale_serves = 0
        self.hooks: list[Callable[[float, SwitchAction, Header], None]] = []

    # ------------------------------------------------------------ dispatch
    def process_packet(self, msg: Message, ingress_is_recirc: bool, now: float) -> list[SwitchAction]:
        op = msg.header.op
        if op == OpCode.R_REQ:
            actions = self.handle_read_request(msg, now)
        elif op == OpCode.R_REP:
            if ingress_is_recirc:
                actions = self.handle_cache_packet(msg, now)
            else:
                actions = [Forward(self.route(msg.dst), msg)]
        elif op == OpCode.W_REQ:
            actions = self.handle_write_request(msg)
        elif op == OpCode.W_REP or op == OpCode.F_REP:
            actions = self.handle_write_or_fetch_reply(msg)
        elif op == OpCode.CRN_REQ or op == OpCode.F_REQ:
            actions = self.handle_correction_request(msg)
        else:
            self.diag_unknown_op += 1
            actions = [Drop(UNKNOWN_OP)]
        if self.hooks:
            for a in actions:
                for hook in self.hooks:
                    hook(now, a, msg.header)
        return actions

    def handle_read_request(self, msg: Message, now: float = 0.0) -> list[SwitchAction]:
        c = self.lookup.get(msg.header.hkey)
        if c is None:
            return [Forward(self.route(msg.dst), msg)]
        self.popularity[c] += 1
        self.cache_hits += 1
        if not self.valid[c]:
            self.invalid_forwarded += 1
            return [Forward(self.route(msg.dst), msg)]
        if self.rt.enqueue(c, ReqMeta(msg.src.node, msg.header.seq, msg.src.port, now)):
            return [Drop(ENQUEUED, c)]
        self.overflow += 1
        return [Forward(self.route(msg.dst), msg)]

    def handle_cache_packet(self, msg: Message, now: float = 0.0) -> list[SwitchAction]:
        c = self.lookup.get(msg.header.hkey)
        if c is None:
            return [Drop(EVICTED)]
        if not self.valid[c] and self.config.mutation != "skip-drop-invalid":
            return [Drop(INVALID, c)]
        flag = msg.header.flag
        if self.config.multi_packet and flag > 1:
            if self.acked[c] != flag:
                meta = self.rt.peek(c)
                if meta is not None:
                    self.acked[c] += 1
            else:
                meta = self.rt.dequeue(c)
                if meta is not None:
                    self.acked[c] = 1
        else:
            meta = self.rt.dequeue(c)
        if meta is None:
            return [Recirculate(msg)]
        if not self.valid[c]:
            self.stale_serves += 1
        h = msg.header
        latency = int(now - meta.timestamp) & 0xFFFFFFFF
        to_client = Message(
            Header(h.op, meta.seq, h.hkey, h.flag), msg.key, msg.value, msg.src,
            Address(meta.client, meta.l4port), Meta(1, latency, msg.meta.srv_id))
        return [CloneMulticast(to_client, msg, self.route(to_client.dst), c)]

    def handle_write_request(self, msg: Message) -> list[SwitchAction]:
        c = self.lookup.get(msg.header.hkey)
        if c is None:
            return [Forward(self.route(msg.dst), msg)]
        mutation = self.config.mutation
        h = msg.header
        out = msg.evolve(header=Header(h.op, h.seq, h.hkey, 1))
        if mutation == "validate-on-write-request":
            # Broken: publish the new value before the server has applied it.
            self.valid[c] = True
            cache = Message(Header(OpCode.R_REP, 0, h.hkey, 0), msg.key, msg.value,
                            msg.dst, msg.src, msg.meta)
            return [Forward(self.route(msg.dst), out), Recirculate(cache)]
        if mutation != "skip-invalidate":
            self.valid[c] = False
            self.pending_writes[c] += 1
        return [Forward(self.route(msg.dst), out)]

    def handle_write_or_fetch_reply(self, msg: Message) -> list[SwitchAction]:
        h = msg.header
        port = self.route(msg.dst)
        c = self.lookup.get(h.hkey)
        if c is None:
            return [Forward(port, msg)]
        if h.op == OpCode.W_REP:
            if h.flag != 1:
                # Write was not flagged at the switch: carries no value.
                return [Forward(port, msg)]
            if self.pending_writes[c] > 0:
                self.pending_writes[c] -= 1
            if self.config.mutation == "validate-on-write-request":
                return [Forward(port, msg)]
        if self.pending_writes[c] > 0:
            return [Forward(port, msg)]
        if self.valid[c] and h.op == OpCode.F_REP:
            if not (self.config.multi_packet and 1 < h.flag and self.parts[c] < h.flag):
                # Duplicate fetch reply (retry); the cache packet already exists.
                return [Forward(port, msg)]
            self.parts[c] += 1
        else:
            self.parts[c] = 1
        self.valid[c] = True
        self.acked[c] = 1
        clone = Message(Header(OpCode.R_REP, h.seq, h.hkey, h.flag if h.op == OpCode.F_REP else 0),
                        msg.key, msg.value, msg.src, msg.dst, msg.meta)
        return [CloneMulticast(msg, clone, port, c)]

    def handle_correction_request(self, msg: Message) -> list[SwitchAction]:
        return [Forward(self.route(msg.dst), msg)]

    # ------------------------------------------------------- controller API
    def read_and_reset_counters(self) -> CounterSnapshot:
        snap = CounterSnapshot(list(self.popularity), self.cache_hits, self.overflow,
                               self.invalid_forwarded)
        n = self.config.max_cache_size
        self.popularity = [0] * n
        self.cache_hits = 0
        self.overflow = 0
        self.invalid_forwarded = 0
        return snap

    def free_indices(self) -> list[int]:
        return [i for i, h in enumerate(self.hkey_at) if h is None]

    def insert_entry(self, hkey: int, idx: int) -> None:
        if not 0 <= idx < self.config.max_cache_size:
            raise ValueError(f"CacheIdx {idx} out of range")
        if hkey in self.lookup:
            raise ValueError("hkey already cached")
        if self.hkey_at[idx] is not None:
            raise ValueError(f"CacheIdx {idx} is in use")
        self.lookup[hkey] = idx
        self.hkey_at[idx] = hkey
        self.valid[idx] = False
        self.pending_writes[idx] = 0
        self.acked[idx] = 1

    def evict_entry(self, hkey: int) -> int:
        idx = self.lookup.pop(hkey, None)
        if idx is None:
            raise KeyError("hkey not cached")
        self.hkey_at[idx] = None
        self.valid[idx] = False
        self.pending_writes[idx] = 0
        if self.config.flush_on_evict:
            self.rt.flush(idx)
        return idx

    def set_valid(self, idx: int, valid: bool) -> None:
        if not 0 <= idx < self.config.max_cache_size:
            raise ValueError(f"CacheIdx {idx} out of range")
        self.valid[idx] = valid

    def cached_hkeys(self) -> dict[int, int]:
        return dict(self.lookup)
