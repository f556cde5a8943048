"""Control plane: popularity collection, cache replacement, fetches, sizing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .messages import Address, Header, Message, OpCode
from .metrics import Recorder
from .simnet import EventLoop

log = logging.getLogger(__name__)


@dataclass
class PopularityView:
    cached: dict[bytes, int]
    uncached: dict[bytes, int]
    period_id: int = 0


@dataclass
class UpdatePlan:
    evictions: list[tuple[bytes, int]] = field(default_factory=list)
    insertions: list[tuple[bytes, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.evictions) + len(self.insertions)


@dataclass
class SizingState:
    target_size: int = 128
    min_size: int = 8
    max_size: int = 1024
    threshold: float = 0.01

    def __post_init__(self) -> None:
        if not self.min_size <= self.target_size <= self.max_size:
            raise ValueError("target_size must lie in [min_size, max_size]")


def build_update_plan(view: PopularityView, target_size: int, cached_idx: dict[bytes, int],
                      free: Iterable[int], home: Callable[[bytes], int] = lambda k: 0,
                      hkey: Optional[Callable[[bytes], int]] = None) -> UpdatePlan:
    """Plan the moves that make the cache hold the ``target_size`` hottest keys.

    Ranking is by (count descending, key ascending) over cached and uncached
    keys together. New keys take the slots of evicted ones first, coldest
    victim first, then free slots in ascending order. With ``hkey``, an
    uncached key whose hash equals a kept or already chosen key is skipped
    (it could not get its own lookup entry).
    """
    pool = dict(view.uncached)
    pool.update(view.cached)
    ranked = sorted(pool.items(), key=lambda kv: (-kv[1], kv[0]))
    chosen: list[bytes] = []
    taken_h: set[int] = set()
    for key, _ in ranked:
        if len(chosen) >= target_size:
            break
        if hkey is not None:
            h = hkey(key)
            if h in taken_h:
                continue
            taken_h.add(h)
        chosen.append(key)
    keep = set(chosen)
    victims = sorted((k for k in cached_idx if k not in keep),
                     key=lambda k: (view.cached.get(k, 0), k))
    plan = UpdatePlan()
    slots: list[int] = []
    for k in victims:
        plan.evictions.append((k, cached_idx[k]))
        slots.append(cached_idx[k])
    slots.extend(sorted(free))
    news = [k for k in chosen if k not in cached_idx]
    for k, slot in zip(news, slots):
        plan.insertions.append((k, slot, home(k)))
    return plan


def resize(overflow: int, served: int, state: SizingState) -> int:
    """Halve when the overflow ratio is above threshold, otherwise double."""
    if overflow < 0 or served < overflow:
        raise ValueError("need served >= overflow >= 0")
    ratio = overflow / served if served else 0.0
    if ratio > state.threshold:
        state.target_size = max(state.min_size, state.target_size // 2)
    else:
        state.target_size = min(state.max_size, state.target_size * 2)
    return state.target_size


@dataclass
class _Fetch:
    key: bytes
    hkey: int
    idx: int
    attempts: int = 1
    done: bool = False


class Controller:
    """Periodic control loop hosted next to a ``SwitchNode``.

    Talks to servers through ``send`` (F-REQ via the switch, so fetches see
    the same link ordering as data traffic) and reads top-k reports from
    ``servers`` directly, standing in for the reliable control channel.
    """

    def __init__(self, loop: EventLoop, switch, servers: list, address: Address, *,
                 send: Callable[[Message, float], None], server_address: Callable[[int], Address],
                 home: Callable[[bytes], int], hkey: Callable[[bytes], int],
                 sizing: Optional[SizingState] = None, auto_size: bool = False,
                 period_ns: float = 1e9, topk_k: Optional[int] = None,
                 fetch_timeout_ns: float = 1e7, fetch_retries: int = 5,
                 admit: Optional[Callable[[bytes], bool]] = None,
                 recorder: Optional[Recorder] = None) -> None:
        self.loop = loop
        self.switch = switch
        self.dp = switch.dp
        self.servers = servers
        self.addr = address
        self.send = send
        self.server_address = server_address
        self.home = home
        self.hkey = hkey
        self.sizing = sizing or SizingState()
        self.auto_size = auto_size
        self.period_ns = period_ns
        self.topk_k = topk_k
        self.fetch_timeout_ns = fetch_timeout_ns
        self.fetch_retries = fetch_retries
        self.admit = admit
        self.rec = recorder or Recorder()
        self.key_idx: dict[bytes, int] = {}
        self._fseq = 0
        self._fetches: dict[int, _Fetch] = {}
        self._by_key: dict[bytes, int] = {}
        self.period_id = 0
        self.update_log: list[dict] = []
        self.rollbacks = 0
        self.fetch_sent = 0
        self.fetch_completed = 0
        self._running = False

    # ------------------------------------------------------------ setup
    def preload(self, keys: Iterable[bytes]) -> None:
        free = sorted(self.dp.free_indices())
        for key, idx in zip(keys, free):
            self._install(key, idx)

    def start(self, first_tick_ns: Optional[float] = None) -> None:
        self._running = True
        t = self.loop.now + self.period_ns if first_tick_ns is None else first_tick_ns
        self.loop.schedule(t, self._tick)

    def stop(self) -> None:
        self._running = False

    # ------------------------------------------------------------ period
    def _tick(self, _=None) -> None:
        if not self._running:
            return
        self.run_period()
        self.loop.schedule(self.loop.now + self.period_ns, self._tick)

    def run_period(self) -> dict:
        now = self.loop.now
        snap = self.dp.read_and_reset_counters()
        cached = {k: (snap.popularity[i] if i < len(snap.popularity) else 0)
                  for k, i in self.key_idx.items()}
        k = self.topk_k or 2 * self.sizing.target_size
        uncached: dict[bytes, int] = {}
        for srv in self.servers:
            for hexkey, count in srv.report_topk(k)["top"]:
                key = bytes.fromhex(hexkey)
                if key in cached or (self.admit is not None and not self.admit(key)):
                    continue
                if count > uncached.get(key, 0):
                    uncached[key] = count
        ratio = snap.overflow / snap.cache_hits if snap.cache_hits else 0.0
        if self.auto_size:
            resize(snap.overflow, snap.cache_hits, self.sizing)
        view = PopularityView(cached, uncached, self.period_id)
        plan = build_update_plan(view, self.sizing.target_size, dict(self.key_idx),
                                 self.dp.free_indices(),
                                 self.home, self.hkey)
        self.execute(plan)
        record = {"period_id": self.period_id, "t_s": round(now / 1e9, 6),
                  "evictions": len(plan.evictions), "insertions": len(plan.insertions),
                  "target_size": self.sizing.target_size, "cache_size": len(self.key_idx),
                  "hits": snap.cache_hits, "overflow": snap.overflow,
                  "overflow_ratio": round(ratio, 6)}
        self.update_log.append(record)
        self.period_id += 1
        return record

    def execute(self, plan: UpdatePlan) -> None:
        for key, idx in plan.evictions:
            self._evict(key)
        for key, idx, _home in plan.insertions:
            self._install(key, idx)

    # ------------------------------------------------------------ entries
    def _evict(self, key: bytes) -> None:
        idx = self.key_idx.pop(key, None)
        if idx is None:
            return
        self.switch.evict(self.hkey(key))
        fseq = self._by_key.pop(key, None)
        if fseq is not None:
            self._fetches[fseq].done = True
            del self._fetches[fseq]

    def _install(self, key: bytes, idx: int) -> None:
        h = self.hkey(key)
        if h in self.dp.lookup:
            log.debug("skip %r: hash already cached", key)
            return
        self.dp.insert_entry(h, idx)
        self.key_idx[key] = idx
        self._fseq = (self._fseq + 1) % (1 << 32)
        f = _Fetch(key, h, idx)
        self._fetches[self._fseq] = f
        self._by_key[key] = self._fseq
        self._send_fetch(self._fseq, f)

    def _send_fetch(self, fseq: int, f: _Fetch) -> None:
        now = self.loop.now
        msg = Message(Header(OpCode.F_REQ, fseq, f.hkey, 0), f.key, b"", self.addr,
                      self.server_address(self.home(f.key)))
        self.fetch_sent += 1
        self.send(msg, now)
        self.loop.schedule(now + self.fetch_timeout_ns, self._timeout, fseq)

    def _timeout(self, fseq: int) -> None:
        f = self._fetches.get(fseq)
        if f is None or f.done:
            return
        if f.attempts > self.fetch_retries:
            # Retry budget spent: give the slot back.
            self.rollbacks += 1
            log.warning("fetch of %r failed after %d attempts; rolling back", f.key, f.attempts)
            self.update_log.append({"period_id": self.period_id, "rollback": f.key.hex(),
                                    "t_s": round(self.loop.now / 1e9, 6)})
            self._evict(f.key)
            return
        f.attempts += 1
        self._send_fetch(fseq, f)

    def receive(self, msg: Message) -> None:
        if msg.header.op != OpCode.F_REP:
            return
        f = self._fetches.pop(msg.header.seq, None)
        if f is None or f.done:
            return
        f.done = True
        self._by_key.pop(f.key, None)
        self.fetch_completed += 1

    @property
    def fetches_outstanding(self) -> int:
        return len(self._fetches)
