"""Deterministic discrete-event core: clock, links, recirculation port.

Time is a float count of simulated nanoseconds. Events are ordered by
``(time, tie_break)`` where ``tie_break`` is a global scheduling counter, so
equal-time events run in the order they were scheduled.
"""

from __future__ import annotations

import heapq
import json
import random
from collections import deque
from typing import Any, Callable, NamedTuple, Optional

NS_PER_S = 1e9


class SimulationError(RuntimeError):
    """An internal inconsistency; the run is invalid."""


class SimEvent(NamedTuple):
    time: float
    tie_break: int
    target: Callable[[Any], None]
    payload: Any


class EventLoop:
    def __init__(self) -> None:
        self.now = 0.0
        self._heap: list[SimEvent] = []
        self._tie = 0
        self.processed = 0

    def schedule(self, time: float, target: Callable[[Any], None], payload: Any = None) -> None:
        if time < self.now:
            raise SimulationError(f"event scheduled in the past ({time} < {self.now})")
        self._tie += 1
        heapq.heappush(self._heap, SimEvent(time, self._tie, target, payload))

    def after(self, delay: float, target: Callable[[Any], None], payload: Any = None) -> None:
        self.schedule(self.now + delay, target, payload)

    def pending(self) -> int:
        return len(self._heap)

    def run(self, until: Optional[float] = None, max_events: Optional[int] = None) -> float:
        """Process events up to ``until`` (inclusive) or ``max_events``.

        Returns the clock value at exit. With an empty queue the clock stays
        at the last processed event.
        """
        heap = self._heap
        pop = heapq.heappop
        budget = max_events if max_events is not None else -1
        while heap and budget != 0:
            if until is not None and heap[0].time > until:
                self.now = until
                break
            ev = pop(heap)
            self.now = ev.time
            ev.target(ev.payload)
            self.processed += 1
            budget -= 1
        return self.now


class Link:
    """One direction of a point-to-point link: FIFO serializer plus propagation.

    ``deliver`` is called with the message on arrival. Random loss, when
    enabled, happens after serialization and is counted.
    """

    __slots__ = ("loop", "deliver", "prop", "ns_per_byte", "busy_until", "loss", "rng",
                 "sent", "delivered", "lost", "lost_ops", "name")

    def __init__(self, loop: EventLoop, deliver: Callable[[Any], None], *,
                 propagation_ns: float = 1000.0, bandwidth_bps: float = 100e9,
                 loss: float = 0.0, rng: Optional[random.Random] = None, name: str = "") -> None:
        self.loop = loop
        self.deliver = deliver
        self.prop = propagation_ns
        self.ns_per_byte = 8 * NS_PER_S / bandwidth_bps
        self.busy_until = 0.0
        self.loss = loss
        self.rng = rng if rng is not None else random.Random(0)
        self.sent = 0
        self.delivered = 0
        self.lost = 0
        self.lost_ops: dict[int, int] = {}
        self.name = name

    def send(self, msg, at: float) -> None:
        start = at if at > self.busy_until else self.busy_until
        self.busy_until = start + msg.wire_size() * self.ns_per_byte
        self.sent += 1
        if self.loss and self.rng.random() < self.loss:
            self.lost += 1
            op = msg.header.op
            self.lost_ops[op] = self.lost_ops.get(op, 0) + 1
            return
        self.loop.schedule(self.busy_until + self.prop, self._arrive, msg)

    def _arrive(self, msg) -> None:
        self.delivered += 1
        self.deliver(msg)

    @property
    def in_flight(self) -> int:
        return self.sent - self.delivered - self.lost


def serialization_ns(size_bytes: int, bandwidth_bps: float) -> float:
    return size_bytes * 8 * NS_PER_S / bandwidth_bps


def recirc_revisit_period(count: int, mean_size: float, *, pipeline_delay_ns: float = 400.0,
                          bandwidth_bps: float = 100e9, serialized: bool = False) -> float:
    """Expected time between two visits of one cache packet.

    ``serialized=True`` treats the pipeline delay as part of every packet's
    service time on the recirculation port (C x (delay + size/bw)). Otherwise
    the pipeline overlaps packets and only serialization is exclusive; a lone
    packet still needs one full pass.
    """
    if count < 1:
        raise ValueError("need at least one cache packet")
    ser = serialization_ns(mean_size, bandwidth_bps)
    if serialized:
        return count * (pipeline_delay_ns + ser)
    return max(count * ser, ser + pipeline_delay_ns)


class CachePacket:
    """A circulating cache packet tracked by a recirculation port."""

    __slots__ = ("pid", "msg", "ser", "anchor", "scheduled", "alive", "visits", "last_visit")

    def __init__(self, pid: int, msg, ser: float) -> None:
        self.pid = pid
        self.msg = msg
        self.ser = ser
        self.anchor = 0.0
        self.scheduled = False
        self.alive = True
        self.visits = 0
        self.last_visit = -1.0


class RecircPort:
    """Common bookkeeping for both recirculation models.

    ``visit`` is a callback ``visit(packet) -> bool`` run when a packet
    re-enters the ingress pipeline; it returns False if the packet was
    dropped. Population changes are ledgered by reason.
    """

    def __init__(self, loop: EventLoop, *, pipeline_delay_ns: float = 400.0,
                 bandwidth_bps: float = 100e9, serialized: bool = False) -> None:
        self.loop = loop
        self.delay = pipeline_delay_ns
        self.bandwidth = bandwidth_bps
        self.serialized = serialized
        self.visit: Callable[[CachePacket], bool] = lambda p: True
        self.packets: dict[int, CachePacket] = {}
        self.by_hkey: dict[int, set[int]] = {}
        self._next_pid = 0
        self.added: dict[str, int] = {}
        self.removed: dict[str, int] = {}
        self.request_violations = 0
        self.total_ser = 0.0
        self.max_ser = 0.0

    # population ---------------------------------------------------------
    @property
    def population(self) -> int:
        return len(self.packets)

    def _service(self, msg) -> float:
        ser = serialization_ns(msg.wire_size(), self.bandwidth)
        return ser + self.delay if self.serialized else ser

    def add(self, msg, at: float, reason: str = "validate") -> CachePacket:
        from .messages import REQUEST_OPS
        if msg.op in REQUEST_OPS:
            # Requests never recirculate.
            self.request_violations += 1
            raise SimulationError(f"request op {msg.op} sent to the recirculation port")
        pkt = CachePacket(self._next_pid, msg, self._service(msg))
        self._next_pid += 1
        self.packets[pkt.pid] = pkt
        self.by_hkey.setdefault(msg.hkey, set()).add(pkt.pid)
        self.total_ser += pkt.ser
        if pkt.ser > self.max_ser:
            self.max_ser = pkt.ser
        self.added[reason] = self.added.get(reason, 0) + 1
        self._on_add(pkt, at)
        return pkt

    def remove(self, pkt: CachePacket, reason: str) -> None:
        if not pkt.alive:
            return
        pkt.alive = False
        del self.packets[pkt.pid]
        pids = self.by_hkey[pkt.msg.hkey]
        pids.discard(pkt.pid)
        if not pids:
            del self.by_hkey[pkt.msg.hkey]
        self.total_ser -= pkt.ser
        if not self.packets:
            self.total_ser = 0.0
            self.max_ser = 0.0
        elif pkt.ser >= self.max_ser:
            self.max_ser = max(p.ser for p in self.packets.values())
        self.removed[reason] = self.removed.get(reason, 0) + 1

    def packets_for(self, hkey: int) -> list[CachePacket]:
        pids = self.by_hkey.get(hkey)
        if not pids:
            return []
        return [self.packets[p] for p in sorted(pids)]

    def ledger_balanced(self) -> bool:
        return sum(self.added.values()) - sum(self.removed.values()) == len(self.packets)

    # hooks for subclasses -------------------------------------------------
    def _on_add(self, pkt: CachePacket, at: float) -> None:
        raise NotImplementedError

    def wake(self, pkt: CachePacket) -> None:
        """Ask for ``pkt`` to be processed at its next visit."""

    def revisit_now(self, pkt: CachePacket) -> None:
        """Run an out-of-band visit at the current instant (rotation model only)."""

    def wake_hkey(self, hkey: int) -> None:
        for pkt in self.packets_for(hkey):
            self.wake(pkt)

    def period(self) -> float:
        """Current steady-state revisit period."""
        if not self.packets:
            return 0.0
        if self.serialized:
            return self.total_ser
        return max(self.total_ser, self.max_ser + self.delay)


class FifoRecircPort(RecircPort):
    """Exact model: one FIFO server; every pass is an event.

    A packet occupies the port for its service time, then (unless the delay
    is folded into service) spends the pipeline delay before its ingress
    visit, where it is either dropped or queued again.
    """

    def __init__(self, loop: EventLoop, **kw) -> None:
        super().__init__(loop, **kw)
        self._queue: deque[CachePacket] = deque()
        self._busy = False

    def _on_add(self, pkt: CachePacket, at: float) -> None:
        if at > self.loop.now:
            self.loop.schedule(at, self._enqueue, pkt)
        else:
            self._enqueue(pkt)

    def _enqueue(self, pkt: CachePacket) -> None:
        if not pkt.alive:
            return
        self._queue.append(pkt)
        if not self._busy:
            self._start()

    def _start(self) -> None:
        while self._queue:
            pkt = self._queue.popleft()
            if pkt.alive:
                self._busy = True
                self.loop.after(pkt.ser, self._done, pkt)
                return
        self._busy = False

    def _done(self, pkt: CachePacket) -> None:
        lag = 0.0 if self.serialized else self.delay
        if lag:
            self.loop.after(lag, self._ingress, pkt)
        else:
            self._ingress(pkt)
        self._start()

    def _ingress(self, pkt: CachePacket) -> None:
        if not pkt.alive:
            return
        now = self.loop.now
        pkt.visits += 1
        pkt.last_visit = now
        if self.visit(pkt) and pkt.alive:
            self._enqueue(pkt)


class RotationRecircPort(RecircPort):
    """Steady-state model of the FIFO loop without per-pass events.

    Cache packets keep their FIFO order, so in steady state each one returns
    every ``period()``. Passes that find nothing to do are skipped; a packet
    is only visited after ``wake`` (pending request, invalidation, eviction)
    or right after it served a request. Visit times follow a per-packet
    phase anchored at its last real or virtual visit.
    """

    def _on_add(self, pkt: CachePacket, at: float) -> None:
        # Joins the tail of the loop: first visit one full period later.
        pkt.anchor = at + self.period()
        pkt.scheduled = True
        self.loop.schedule(max(pkt.anchor, self.loop.now), self._visit, pkt)

    def next_visit(self, pkt: CachePacket, after: float) -> float:
        """First pass of ``pkt`` strictly later than ``after``."""
        if pkt.anchor > after:
            return pkt.anchor
        period = self.period()
        k = int((after - pkt.anchor) // period) + 1
        return pkt.anchor + k * period

    def wake(self, pkt: CachePacket) -> None:
        if pkt.scheduled or not pkt.alive:
            return
        pkt.scheduled = True
        self.loop.schedule(self.next_visit(pkt, self.loop.now), self._visit, pkt)

    def revisit_now(self, pkt: CachePacket) -> None:
        if pkt.alive:
            pkt.visits += 1
            self.visit(pkt)

    def _visit(self, pkt: CachePacket) -> None:
        if not pkt.alive:
            return
        now = self.loop.now
        pkt.scheduled = False
        pkt.anchor = now
        pkt.visits += 1
        pkt.last_visit = now
        self.visit(pkt)


def make_recirc_port(model: str, loop: EventLoop, **kw) -> RecircPort:
    if model == "fifo":
        return FifoRecircPort(loop, **kw)
    if model == "rotation":
        return RotationRecircPort(loop, **kw)
    raise ValueError(f"unknown recirculation model {model!r}")


class TraceWriter:
    """Line-delimited JSON event trace (one record per switch action or delivery)."""

    def __init__(self, path) -> None:
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")

    def close(self) -> None:
        self._fh.close()
