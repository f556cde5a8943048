"""Post-run ledger audits over a finished ``Simulation``.

Keys starting with ``ok_`` are pass/fail checks; keys ending in
``_violations`` must be zero. Everything else is informational.
"""

from __future__ import annotations

from .coherence import check
from .messages import OpCode
from .simnet import Link

CLIENT_OPS = frozenset({OpCode.R_REQ, OpCode.W_REQ, OpCode.CRN_REQ, OpCode.R_REP, OpCode.W_REP})


def _in_flight_client_messages(sim) -> int:
    """Client requests/replies sitting in link or server-queue events."""
    n = 0
    for ev in sim.loop._heap:
        target = ev.target
        fn = getattr(target, "__func__", None)
        if fn is Link._arrive or getattr(fn, "__name__", "") == "_serve":
            msg = ev.payload
            # Fetch traffic uses controller addresses, never client ones.
            if msg.header.op in CLIENT_OPS and msg.src.node != 1 and msg.dst.node != 1:
                n += 1
    return n


def audit(sim) -> dict:
    res: dict = {}
    dp = sim.dp
    recirc = sim.switch.recirc
    clients = sim.clients

    sent = sum(c.stats.sent for c in clients)
    completed = sum(c.stats.completed for c in clients)
    outstanding = sum(c.outstanding for c in clients)
    res["ok_client_accounting"] = sent == completed + outstanding

    lost = sum(n for ln in sim.links for op, n in ln.lost_ops.items() if op in CLIENT_OPS)
    drops = sum(s.stats.queue_drops for s in sim.servers)
    in_flight = _in_flight_client_messages(sim)
    rt = getattr(dp, "rt", None)
    queued = rt.outstanding() if rt is not None else 0
    flushed = rt.flushed if rt is not None else 0
    res["conservation"] = {"outstanding": outstanding, "in_flight": in_flight, "queued": queued,
                           "lost": lost, "server_drops": drops, "flushed": flushed}
    if not sim.cfg.cache.multi_packet:
        # Every outstanding request is somewhere: on a wire, in a server queue,
        # parked in the request table, or dropped with a counted reason.
        res["ok_message_conservation"] = outstanding == in_flight + queued + lost + drops + flushed
    res["ok_links"] = all(ln.in_flight >= 0 for ln in sim.links)

    if rt is not None:
        res["ok_request_table"] = rt.consistent()
        res["ok_metadata_ledger"] = rt.enqueued == rt.dequeued + rt.outstanding() + rt.flushed
    res["stale_serve_violations"] = getattr(dp, "stale_serves", 0)
    if recirc is not None:
        res["ok_population_ledger"] = recirc.ledger_balanced()
        res["request_recirc_violations"] = recirc.request_violations
        res["cache_packets"] = recirc.population
        res["population_added"] = dict(sorted(recirc.added.items()))
        res["population_removed"] = dict(sorted(recirc.removed.items()))
    res["wrong_value_violations"] = sum(c.stats.wrong_value for c in clients)
    res["spurious_replies"] = sum(c.stats.spurious for c in clients)

    if sim.history is not None:
        result = check(sim.history, sim.wl.initial_value)
        res["coherence_violations"] = result.violation_count
        res["coherence_reads_checked"] = result.reads_checked
        res["coherence_writes"] = result.writes
        res["coherence_examples"] = [v.describe() for v in result.violations[:5]]
    return res
