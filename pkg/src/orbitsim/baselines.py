"""Comparison data planes: plain forwarding and a NetCache-style value cache.

Both expose the same surface as ``OrbitCacheDataPlane`` so the switch node,
controller and harness can host any of them.
"""

from __future__ import annotations

from typing import Callable, Optional

from .dataplane import INVALID, UNKNOWN_OP, CounterSnapshot, DataPlaneConfig, Drop, Forward
from .messages import Address, Header, Message, Meta, OpCode


class NoCacheDataPlane:
    """Forwards every packet to its destination."""

    def __init__(self, config: Optional[DataPlaneConfig] = None, *,
                 route: Callable[[Address], int] = lambda a: a.node) -> None:
        self.config = config or DataPlaneConfig(max_cache_size=0)
        self.route = route
        self.lookup: dict[int, int] = {}
        self.hkey_at: list = []
        self.cache_hits = 0
        self.overflow = 0
        self.invalid_forwarded = 0
        self.served_direct = 0
        self.stale_serves = 0
        self.diag_unknown_op = 0

    def process_packet(self, msg: Message, ingress_is_recirc: bool = False, now: float = 0.0):
        if ingress_is_recirc:
            return [Drop(INVALID)]
        try:
            OpCode(msg.header.op)
        except ValueError:
            self.diag_unknown_op += 1
            return [Drop(UNKNOWN_OP)]
        return [Forward(self.route(msg.dst), msg)]

    def read_and_reset_counters(self) -> CounterSnapshot:
        return CounterSnapshot([], 0, 0, 0)

    def free_indices(self) -> list[int]:
        return []

    def cached_hkeys(self) -> dict[int, int]:
        return {}


class NetCacheDataPlane:
    """Values stored in switch tables; read hits are answered in one pass.

    Items are matched on the exact key (the hash only selects the slot).
    Items over ``key_limit`` / ``value_limit`` are refused at validation.
    """

    def __init__(self, config: Optional[DataPlaneConfig] = None, *,
                 route: Callable[[Address], int] = lambda a: a.node,
                 key_limit: int = 16, value_limit: int = 64) -> None:
        self.config = config or DataPlaneConfig(max_cache_size=1000)
        self.route = route
        self.key_limit = key_limit
        self.value_limit = value_limit
        n = self.config.max_cache_size
        self.lookup: dict[int, int] = {}
        self.hkey_at: list[Optional[int]] = [None] * n
        self.keys: list[Optional[bytes]] = [None] * n
        self.values: list[Optional[bytes]] = [None] * n
        self.valid = [False] * n
        self.pending_writes = [0] * n
        self.popularity = [0] * n
        self.cache_hits = 0
        self.overflow = 0
        self.invalid_forwarded = 0
        self.served_direct = 0
        self.stale_serves = 0
        self.rejected_oversize = 0
        self.diag_unknown_op = 0

    def fits(self, key: bytes, value: bytes) -> bool:
        return len(key) <= self.key_limit and len(value) <= self.value_limit

    def _slot(self, msg: Message) -> Optional[int]:
        c = self.lookup.get(msg.header.hkey)
        if c is None or (self.keys[c] is not None and self.keys[c] != msg.key):
            return None
        return c

    def process_packet(self, msg: Message, ingress_is_recirc: bool = False, now: float = 0.0):
        op = msg.header.op
        if ingress_is_recirc:
            return [Drop(INVALID)]
        if op == OpCode.R_REQ:
            return self._read(msg)
        if op == OpCode.W_REQ:
            return self._write(msg)
        if op in (OpCode.W_REP, OpCode.F_REP):
            return self._reply(msg)
        if op in (OpCode.R_REP, OpCode.F_REQ, OpCode.CRN_REQ):
            return [Forward(self.route(msg.dst), msg)]
        self.diag_unknown_op += 1
        return [Drop(UNKNOWN_OP)]

    def _read(self, msg: Message):
        c = self._slot(msg)
        if c is None:
            return [Forward(self.route(msg.dst), msg)]
        self.popularity[c] += 1
        self.cache_hits += 1
        if not self.valid[c]:
            self.invalid_forwarded += 1
            return [Forward(self.route(msg.dst), msg)]
        h = msg.header
        reply = Message(Header(OpCode.R_REP, h.seq, h.hkey, 0), self.keys[c], self.values[c],
                        msg.dst, msg.src, Meta(1, 0, 0))
        self.served_direct += 1
        return [Forward(self.route(msg.src), reply)]

    def _write(self, msg: Message):
        c = self._slot(msg)
        if c is None:
            return [Forward(self.route(msg.dst), msg)]
        self.valid[c] = False
        self.pending_writes[c] += 1
        h = msg.header
        return [Forward(self.route(msg.dst), msg.evolve(header=Header(h.op, h.seq, h.hkey, 1)))]

    def _reply(self, msg: Message):
        port = self.route(msg.dst)
        c = self._slot(msg)
        h = msg.header
        if c is None:
            return [Forward(port, msg)]
        if h.op == OpCode.W_REP:
            if h.flag != 1:
                return [Forward(port, msg)]
            if self.pending_writes[c] > 0:
                self.pending_writes[c] -= 1
        if self.pending_writes[c] > 0 or (h.op == OpCode.F_REP and self.valid[c]):
            return [Forward(port, msg)]
        if not self.fits(msg.key, msg.value):
            self.rejected_oversize += 1
            return [Forward(port, msg)]
        self.keys[c] = msg.key
        self.values[c] = msg.value
        self.valid[c] = True
        return [Forward(port, msg)]

    # controller API ------------------------------------------------------
    def read_and_reset_counters(self) -> CounterSnapshot:
        snap = CounterSnapshot(list(self.popularity), self.cache_hits, 0, self.invalid_forwarded)
        self.popularity = [0] * self.config.max_cache_size
        self.cache_hits = 0
        self.invalid_forwarded = 0
        return snap

    def free_indices(self) -> list[int]:
        return [i for i, h in enumerate(self.hkey_at) if h is None]

    def insert_entry(self, hkey: int, idx: int) -> None:
        if not 0 <= idx < self.config.max_cache_size:
            raise ValueError(f"CacheIdx {idx} out of range")
        if hkey in self.lookup or self.hkey_at[idx] is not None:
            raise ValueError("slot or hkey already in use")
        self.lookup[hkey] = idx
        self.hkey_at[idx] = hkey
        self.keys[idx] = None
        self.values[idx] = None
        self.valid[idx] = False
        self.pending_writes[idx] = 0

    def evict_entry(self, hkey: int) -> int:
        idx = self.lookup.pop(hkey, None)
        if idx is None:
            raise KeyError("hkey not cached")
        self.hkey_at[idx] = None
        self.keys[idx] = None
        self.values[idx] = None
        self.valid[idx] = False
        self.pending_writes[idx] = 0
        return idx

    def cached_hkeys(self) -> dict[int, int]:
        return dict(self.lookup)

    def contents(self) -> list[tuple[bytes, bytes]]:
        return [(k, v) for k, v, ok in zip(self.keys, self.values, self.valid) if ok and k is not None]
