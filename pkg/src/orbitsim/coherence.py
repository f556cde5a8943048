"""Operation history and a per-key regularity checker.

A read returning ``v`` for key ``k`` between send time ``s`` and receive
time ``r`` is accepted iff ``v`` was ``k``'s stored value at some instant of
``[s, r]``: the write that produced ``v`` happened no later than ``r``, and
the next write of ``k`` happened after ``s``. Values not produced by any
recorded write must be the key's initial value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional


class WriteApplied(NamedTuple):
    key: bytes
    value: bytes
    time: float
    order: int


class ReadServed(NamedTuple):
    key: bytes
    value: bytes
    send_time: float
    recv_time: float
    served_by: str
    order: int


@dataclass
class History:
    writes: list[WriteApplied] = field(default_factory=list)
    reads: list[ReadServed] = field(default_factory=list)
    _n: int = 0

    def write_applied(self, key: bytes, value: bytes, t: float) -> None:
        self._n += 1
        self.writes.append(WriteApplied(key, value, t, self._n))

    def read_served(self, key: bytes, value: bytes, send: float, recv: float, by: str) -> None:
        self._n += 1
        self.reads.append(ReadServed(key, value, send, recv, by, self._n))

    def dump(self, path) -> None:
        """Line-delimited JSON; one record per event, in recording order."""
        events = sorted([("w", e) for e in self.writes] + [("r", e) for e in self.reads],
                        key=lambda x: x[1].order)
        with open(path, "w", encoding="utf-8") as fh:
            for kind, e in events:
                if kind == "w":
                    rec = {"kind": "write-applied", "key": e.key.hex(), "value": e.value.hex(),
                           "t": e.time}
                else:
                    rec = {"kind": "read-served", "key": e.key.hex(), "value": e.value.hex(),
                           "send": e.send_time, "recv": e.recv_time, "by": e.served_by}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "History":
        h = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                k, v = bytes.fromhex(rec["key"]), bytes.fromhex(rec["value"])
                if rec["kind"] == "write-applied":
                    h.write_applied(k, v, rec["t"])
                else:
                    h.read_served(k, v, rec["send"], rec["recv"], rec["by"])
        return h


@dataclass
class Violation:
    read: ReadServed
    reason: str
    value_written_at: Optional[float]
    next_write_at: Optional[float]

    def describe(self) -> str:
        r = self.read
        return (f"key={r.key!r} value={r.value[:40]!r} window=[{r.send_time:.1f},{r.recv_time:.1f}] "
                f"by={r.served_by}: {self.reason} (written_at={self.value_written_at}, "
                f"next_write_at={self.next_write_at})")


@dataclass
class CheckResult:
    reads_checked: int
    writes: int
    violations: list[Violation]
    violation_count: int = 0

    @property
    def ok(self) -> bool:
        return self.violation_count == 0


def check(history: History, initial_value: Optional[Callable[[bytes], bytes]] = None,
          max_report: int = 100) -> CheckResult:
    per_key: dict[bytes, list[WriteApplied]] = {}
    for w in sorted(history.writes, key=lambda w: (w.time, w.order)):
        per_key.setdefault(w.key, []).append(w)
    times: dict[bytes, list[float]] = {k: [w.time for w in ws] for k, ws in per_key.items()}
    where: dict[tuple[bytes, bytes], int] = {}
    for k, ws in per_key.items():
        for i, w in enumerate(ws):
            where.setdefault((k, w.value), i)

    violations: list[Violation] = []
    n_viol = 0
    for r in history.reads:
        ws = per_key.get(r.key, [])
        ts = times.get(r.key, [])
        i = where.get((r.key, r.value))
        if i is None:
            if initial_value is not None and r.value != initial_value(r.key):
                reason = "value was never written for this key"
                written, nxt = None, None
            else:
                written, nxt = None, (ts[0] if ts else None)
                if nxt is None or nxt > r.send_time:
                    continue
                reason = "initial value read after it was overwritten"
        else:
            written = ws[i].time
            nxt = ts[i + 1] if i + 1 < len(ts) else None
            if written <= r.recv_time and (nxt is None or nxt > r.send_time):
                continue
            reason = "value read before it was written" if written > r.recv_time else "stale value"
        n_viol += 1
        if len(violations) < max_report:
            violations.append(Violation(r, reason, written, nxt))
    return CheckResult(len(history.reads), len(history.writes), violations, n_viol)
