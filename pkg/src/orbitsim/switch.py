"""Switch node: binds a data-plane model to links and the recirculation port."""

from __future__ import annotations

from typing import Optional

from .dataplane import (
    ENQUEUED,
    CloneMulticast,
    Drop,
    Forward,
    Recirculate,
)
from .messages import OpCode
from .metrics import Recorder
from .simnet import CachePacket, EventLoop, Link, RecircPort, SimulationError


class SwitchNode:
    """Event-loop entity wrapping a data plane.

    ``links`` maps egress port numbers to outgoing links. The data plane's
    ``route`` decides the port; ports equal node ids by convention.
    """

    def __init__(self, loop: EventLoop, dataplane, *, recirc: Optional[RecircPort] = None,
                 pipeline_delay_ns: float = 400.0, recorder: Optional[Recorder] = None,
                 trace=None) -> None:
        self.loop = loop
        self.dp = dataplane
        self.recirc = recirc
        self.delay = pipeline_delay_ns
        self.links: dict[int, Link] = {}
        self.rec = recorder or Recorder()
        self.trace = trace
        self.received = 0
        self.forwarded = 0
        self.absorbed = 0
        self.dropped: dict[str, int] = {}
        self.cache_served = 0
        self.pop_samples: list[tuple[float, int]] = []
        if recirc is not None:
            recirc.visit = self._visit

    def attach(self, port: int, link: Link) -> None:
        self.links[port] = link

    # ------------------------------------------------------------ ingress
    def receive(self, msg) -> None:
        now = self.loop.now
        self.received += 1
        dp = self.dp
        op = msg.header.op
        if op == OpCode.R_REQ:
            before = (dp.cache_hits, dp.overflow, dp.invalid_forwarded, dp.served_direct)
            actions = dp.process_packet(msg, False, now)
            rec = self.rec
            if dp.cache_hits != before[0]:
                rec.hit("hits", now)
                if dp.overflow != before[1]:
                    rec.hit("overflow", now)
                elif dp.invalid_forwarded != before[2]:
                    rec.hit("invalid_forwarded", now)
                elif dp.served_direct != before[3]:
                    rec.hit("switch_served", now)
        else:
            actions = dp.process_packet(msg, False, now)
        egress = now + self.delay
        for a in actions:
            kind = type(a)
            if kind is Forward:
                self._send(a.port, a.msg, egress)
                self.forwarded += 1
            elif kind is Drop:
                if a.reason == ENQUEUED:
                    self.absorbed += 1
                    if self.recirc is not None:
                        self.recirc.wake_hkey(self.dp.hkey_at[a.idx])
                else:
                    self.dropped[a.reason] = self.dropped.get(a.reason, 0) + 1
            elif kind is CloneMulticast:
                self._send(a.port, a.to_client, egress)
                self.forwarded += 1
                self._recirc_add(a.to_recirc, egress, "validate")
            elif kind is Recirculate:
                self._recirc_add(a.msg, egress, "inject")
            if self.trace is not None:
                self._trace(now, a, msg)
        if op == OpCode.W_REQ and self.recirc is not None:
            # Packets of an invalidated entry are visited right away; in the
            # loop they would be dropped on their next pass anyway.
            for pkt in self.recirc.packets_for(msg.header.hkey):
                self.recirc.revisit_now(pkt)

    def _send(self, port: int, msg, at: float) -> None:
        link = self.links.get(port)
        if link is None:
            raise SimulationError(f"no link on port {port}")
        link.send(msg, at)

    def _recirc_add(self, msg, at: float, reason: str) -> None:
        if self.recirc is None:
            raise SimulationError("data plane emitted a cache packet but the switch has no recirculation port")
        if msg.header.op != OpCode.R_REP:
            msg = msg.evolve(header=msg.header._replace(op=OpCode.R_REP))
        self.recirc.add(msg, at, reason)
        self.pop_samples.append((at, self.recirc.population))

    # ---------------------------------------------------- recirculation
    def _visit(self, pkt: CachePacket) -> bool:
        now = self.loop.now
        actions = self.dp.process_packet(pkt.msg, True, now)
        a = actions[0]
        kind = type(a)
        if self.trace is not None:
            self._trace(now, a, pkt.msg)
        if kind is CloneMulticast:
            self._send(a.port, a.to_client, now + self.delay)
            self.cache_served += 1
            self.rec.hit("switch_served", now)
            self.recirc.wake(pkt)
            return True
        if kind is Recirculate:
            return True
        self.recirc.remove(pkt, a.reason if kind is Drop else "other")
        self.pop_samples.append((now, self.recirc.population))
        return False

    # --------------------------------------------------- control plane
    def evict(self, hkey: int) -> int:
        idx = self.dp.evict_entry(hkey)
        if self.recirc is not None:
            self.recirc.wake_hkey(hkey)
        return idx

    def _trace(self, now: float, action, msg) -> None:
        h = msg.header
        self.trace.write({"t": round(now, 3), "action": type(action).__name__,
                          "reason": getattr(action, "reason", None), "op": int(h.op),
                          "seq": h.seq, "hkey": f"{h.hkey:032x}", "flag": h.flag})
