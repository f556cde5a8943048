"""Topology assembly, single runs, saturation search and sweeps."""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from ..baselines import NetCacheDataPlane, NoCacheDataPlane
from ..client import Client, LatencyRecorder
from ..coherence import History
from ..controller import Controller, SizingState
from ..dataplane import DataPlaneConfig, OrbitCacheDataPlane
from ..messages import Address, hash_key, partition
from ..metrics import Recorder
from ..server import KvStore, StorageServer
from ..simnet import EventLoop, Link, TraceWriter, make_recirc_port
from ..switch import SwitchNode
from ..workloads import DynamicPattern, SizeModel, Workload, item_of_key, load_histogram
from .config import ExperimentConfig

log = logging.getLogger(__name__)

CONTROLLER_NODE = 1
SERVER_BASE = 1000
CLIENT_BASE = 100_000


def build_workload(cfg: ExperimentConfig) -> Workload:
    w = cfg.workload
    hist = load_histogram(w.histogram) if w.size_model == "histogram" else ()
    sizes = SizeModel(w.size_model, w.key_bytes, w.small_value, w.large_value, w.p_small, hist)
    pattern = DynamicPattern(w.pattern, w.swap_count, w.swap_period_s)
    return Workload(w.n_keys, w.alpha, sizes, w.write_ratio, pattern, cfg.servers,
                    cfg.cache.hash_bits, cfg.seed)


def netcache_keys(wl: Workload, size: int, key_limit: int, value_limit: int,
                  path: Optional[str] = None) -> list[bytes]:
    """Preloaded NetCache key set: the cacheable items among the ``size`` hottest.

    Value sizes are assigned per block of 1000 ranks with exact proportions,
    so this is a seeded uniform sample holding the model's small-value share.
    With ``path``, an existing file is reused and a missing one is written.
    """
    if path is not None and Path(path).exists():
        return [line.strip().encode() for line in Path(path).read_text().splitlines() if line.strip()]
    keys = []
    for item in wl.hottest(size):
        key = wl.meta(item)[0]
        if len(key) <= key_limit and wl.value_size(item) <= value_limit:
            keys.append(key)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("".join(k.decode() + "\n" for k in keys))
    return keys


@dataclass
class MetricsReport:
    name: str
    scheme: str
    seed: int
    offered_load: float
    throughput_rps: float
    switch_rps: float
    server_rps: list[float]
    rx_rps: list[float]
    balancing_efficiency: float
    latency_us: dict[str, dict[str, Optional[float]]]
    hits: float
    overflow: float
    overflow_ratio: float
    forwarded_ratio: float
    corrections: int
    completed: int
    sent: int
    outstanding: int
    wrong_values: int
    server_drops: int
    population_timeline: list[int]
    throughput_series: list[float]
    overflow_series: list[float]
    hits_series: list[float]
    bin_s: float
    controller_log: list[dict]
    revisit_period_ns: Optional[float]
    audit: dict[str, Any]
    audit_ok: bool
    iterations: int = 1
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> dict:
        r = {"name": self.name, "scheme": self.scheme, "seed": self.seed,
             "offered_load": round(self.offered_load, 3),
             "throughput_rps": round(self.throughput_rps, 3),
             "switch_rps": round(self.switch_rps, 3),
             "balancing_efficiency": round(self.balancing_efficiency, 6),
             "overflow_ratio": round(self.overflow_ratio, 6),
             "forwarded_ratio": round(self.forwarded_ratio, 6),
             "corrections": self.corrections}
        for cls in ("cached-read", "server-read", "cached-write", "server-write"):
            lat = self.latency_us.get(cls, {})
            r[f"{cls}_median_us"] = _r(lat.get("median"))
            r[f"{cls}_p99_us"] = _r(lat.get("p99"))
        r["audit_ok"] = self.audit_ok
        return r


def _r(v: Optional[float], nd: int = 3):
    return None if v is None else round(v, nd)


class Simulation:
    """One fully wired simulated rack."""

    def __init__(self, cfg: ExperimentConfig) -> None:
        self.cfg = cfg
        s, c = cfg.sim, cfg.cache
        self.loop = loop = EventLoop()
        self.duration_ns = s.duration_s * 1e9
        self.rec = Recorder(s.warmup_s * 1e9, self.duration_ns, s.bin_s * 1e9)
        self.wl = wl = build_workload(cfg)
        self.history = History() if s.history else None
        self.trace = TraceWriter(s.trace) if s.trace else None
        bw = s.bandwidth_gbps * 1e9
        loss_rng = random.Random(cfg.seed * 7919 + 1)
        self.links: list[Link] = []

        def link(deliver, name, loss=s.loss) -> Link:
            ln = Link(loop, deliver, propagation_ns=s.link_delay_ns, bandwidth_bps=bw,
                      loss=loss, rng=loss_rng, name=name)
            self.links.append(ln)
            return ln

        # switch
        recirc = None
        if cfg.scheme == "orbitcache":
            cap = c.max_size if c.auto_size else max(c.size, 1)
            dp = OrbitCacheDataPlane(DataPlaneConfig(cap, c.queue_size, c.multi_packet,
                                                     c.flush_on_evict, c.mutation))
            recirc = make_recirc_port(s.recirc_model, loop, pipeline_delay_ns=s.pipeline_delay_ns,
                                      bandwidth_bps=bw, serialized=s.recirc_serialized)
        elif cfg.scheme == "netcache":
            dp = NetCacheDataPlane(DataPlaneConfig(max(c.netcache_size, 1)),
                                   key_limit=c.netcache_key_limit,
                                   value_limit=c.netcache_value_limit)
        else:
            dp = NoCacheDataPlane()
        self.dp = dp
        self.switch = sw = SwitchNode(loop, dp, recirc=recirc, pipeline_delay_ns=s.pipeline_delay_ns,
                                      recorder=self.rec, trace=self.trace)

        # servers
        self.servers: list[StorageServer] = []
        for sid in range(cfg.servers):
            addr = self.server_address(sid)
            store = KvStore(sid, cfg.servers, factory=wl.initial_value)
            up = link(sw.receive, f"srv{sid}->sw")
            srv = StorageServer(loop, sid, addr, store, rate=cfg.server_rate, send=up.send,
                                queue_capacity=s.server_queue_capacity, history=self.history,
                                recorder=self.rec)
            sw.attach(addr.node, link(srv.receive, f"sw->srv{sid}"))
            self.servers.append(srv)

        # clients
        self.clients: list[Client] = []
        per_client = cfg.offered_load / cfg.clients
        for cid in range(cfg.clients):
            addr = Address(CLIENT_BASE + cid, 5000 + cid)
            up = link(sw.receive, f"cl{cid}->sw")
            cl = Client(loop, cid, addr, wl, rate=per_client, send=up.send,
                        server_address=self.server_address, seed=cfg.seed,
                        stop_ns=self.duration_ns, history=self.history, recorder=self.rec,
                        latency=LatencyRecorder(seed=cfg.seed * 31 + cid),
                        multi_packet=c.multi_packet)
            sw.attach(addr.node, link(cl.receive, f"sw->cl{cid}"))
            self.clients.append(cl)

        # controller
        self.controller: Optional[Controller] = None
        if cfg.scheme != "nocache" and (c.preload or c.controller):
            self._build_controller(link)

    @staticmethod
    def server_address(sid: int) -> Address:
        return Address(SERVER_BASE + sid, 0)

    def _build_controller(self, link) -> None:
        cfg, c, wl = self.cfg, self.cfg.cache, self.wl
        addr = Address(CONTROLLER_NODE, 0)
        up = link(self.switch.receive, "ctl->sw", loss=cfg.sim.control_loss)
        admit = None
        if cfg.scheme == "netcache":
            target = c.netcache_size
            kl, vl = c.netcache_key_limit, c.netcache_value_limit
            admit = lambda key: len(key) <= kl and wl.value_size(item_of_key(key)) <= vl  # noqa: E731
            preload = netcache_keys(wl, c.netcache_size, kl, vl, c.netcache_keyfile)
            sizing = SizingState(max(target, 1), 1, max(target, 1), c.threshold)
        else:
            sizing = SizingState(c.size, min(c.min_size, c.size), max(c.max_size, c.size), c.threshold)
            preload = [wl.meta(i)[0] for i in wl.hottest(c.size)]
        bits, n = c.hash_bits, cfg.servers
        ctl = Controller(self.loop, self.switch, self.servers, addr, send=up.send,
                         server_address=self.server_address,
                         home=lambda key: partition(key, n),
                         hkey=lambda key: hash_key(key, bits),
                         sizing=sizing, auto_size=c.auto_size and cfg.scheme == "orbitcache",
                         period_ns=c.period_s * 1e9, topk_k=c.topk_k,
                         fetch_timeout_ns=c.fetch_timeout_ms * 1e6, fetch_retries=c.fetch_retries,
                         admit=admit, recorder=self.rec)
        self.switch.attach(addr.node, link(ctl.receive, "sw->ctl", loss=cfg.sim.control_loss))
        if c.preload:
            ctl.preload(preload)
        if c.controller:
            ctl.start()
        self.controller = ctl

    # ------------------------------------------------------------ running
    def run(self) -> MetricsReport:
        self.loop.run(until=self.duration_ns)
        if self.trace is not None:
            self.trace.close()
        return self.report()

    def report(self) -> MetricsReport:
        from ..audit import audit  # local import: audit inspects Simulation internals
        cfg, rec = self.cfg, self.rec
        n = cfg.servers
        server_rps = [rec.rate(f"srv{i}") for i in range(n)]
        rx_rps = [rec.rate(f"rx{i}") for i in range(n)]
        switch_rps = rec.rate("switch_served")
        top = max(server_rps) if server_rps else 0.0
        eff = min(server_rps) / top if top > 0 else 0.0
        hits = rec.window.get("hits", 0.0)
        overflow = rec.window.get("overflow", 0.0)
        invalid = rec.window.get("invalid_forwarded", 0.0)
        lat = LatencyRecorder(capacity=10**9)
        for cl in self.clients:
            lat.merge(cl.latency)
        latency = {cls: {"median": _r(lat.percentile(cls, 50)), "p99": _r(lat.percentile(cls, 99)),
                         "count": len(lat.samples[cls])}
                   for cls in sorted(lat.samples)}
        n_bins = max(1, int(round(self.duration_ns / rec.bin_ns)))
        bin_s = rec.bin_ns / 1e9
        served = rec.series("switch_served", n_bins)
        for i in range(n):
            for b, v in enumerate(rec.series(f"srv{i}", n_bins)):
                served[b] += v
        report = MetricsReport(
            name=cfg.name, scheme=cfg.scheme, seed=cfg.seed, offered_load=cfg.offered_load,
            throughput_rps=switch_rps + sum(server_rps), switch_rps=switch_rps,
            server_rps=server_rps, rx_rps=rx_rps, balancing_efficiency=eff, latency_us=latency,
            hits=hits, overflow=overflow,
            overflow_ratio=overflow / hits if hits else 0.0,
            forwarded_ratio=(overflow + invalid) / hits if hits else 0.0,
            corrections=sum(cl.stats.corrections for cl in self.clients),
            completed=sum(cl.stats.completed for cl in self.clients),
            sent=sum(cl.stats.sent for cl in self.clients),
            outstanding=sum(cl.outstanding for cl in self.clients),
            wrong_values=sum(cl.stats.wrong_value for cl in self.clients),
            server_drops=sum(s.stats.queue_drops for s in self.servers),
            population_timeline=self._population(n_bins),
            throughput_series=[v / bin_s for v in served],
            overflow_series=rec.series("overflow", n_bins),
            hits_series=rec.series("hits", n_bins),
            bin_s=bin_s,
            controller_log=list(self.controller.update_log) if self.controller else [],
            revisit_period_ns=self.switch.recirc.period() if self.switch.recirc else None,
            audit={}, audit_ok=True)
        report.audit = audit(self)
        report.audit_ok = all(v is True or v == 0 for k, v in report.audit.items()
                              if k.startswith("ok_") or k.endswith("_violations"))
        return report

    def _population(self, n_bins: int) -> list[int]:
        samples = self.switch.pop_samples
        out, cur, j = [], 0, 0
        for b in range(n_bins):
            edge = (b + 1) * self.rec.bin_ns
            while j < len(samples) and samples[j][0] < edge:
                cur = samples[j][1]
                j += 1
            out.append(cur)
        return out


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    if cfg.saturate:
        return saturate(cfg)
    return Simulation(cfg).run()


def saturate(cfg: ExperimentConfig, iterations: int = 8, tol: float = 0.02) -> MetricsReport:
    """Highest offered load at which the busiest server receives at most its rate.

    Proportional steps ``load * rate / max_rx`` until the target is bracketed,
    then geometric bisection (peak rx can jump steeply once a hot key's queue
    starts overflowing, which makes the plain fixed point oscillate). Every
    step reuses the seed. Returns the best run under the limit, or the last
    run if none was.
    """
    rate = cfg.server_rate
    load = cfg.offered_load
    lo: Optional[tuple[float, MetricsReport]] = None
    hi: Optional[float] = None
    rep = None
    for it in range(1, iterations + 1):
        rep = Simulation(cfg.replace(offered_load=load, saturate=False)).run()
        rep.iterations = it
        peak = max(rep.rx_rps)
        log.info("saturate %s it=%d load=%.0f peak_rx=%.0f", cfg.name, it, load, peak)
        if peak <= 0:
            break
        if peak <= rate * (1 + tol):
            if lo is None or load > lo[0]:
                lo = (load, rep)
            if peak >= rate * (1 - tol):
                break
        else:
            hi = load if hi is None else min(hi, load)
        if lo is not None and hi is not None:
            if hi / lo[0] <= 1 + tol:
                break
            load = (lo[0] * hi) ** 0.5
        else:
            load = load * rate / peak
            if hi is not None:
                load = min(load, hi * (1 - tol))
    if lo is not None:
        lo[1].iterations = rep.iterations if rep else 1
        return lo[1]
    return rep


def derive_seed(base: int, index: int) -> int:
    return (base * 1_000_003 + index * 7_919 + 1) % (2**31 - 1)


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence[Any],
          same_seed: bool = False) -> list[dict]:
    """One run per axis value; a failing run becomes an error row."""
    rows = []
    for i, v in enumerate(values):
        try:
            seed = cfg.seed if same_seed else derive_seed(cfg.seed, i)
            run_cfg = cfg.replace(**{axis: v, "seed": seed})
            rep = run_experiment(run_cfg)
            row = {"axis": axis, "value": v, **rep.row()}
            rows.append({"row": row, "report": rep})
        except Exception as exc:  # keep sweeping
            log.error("sweep %s=%r failed: %s", axis, v, exc)
            rows.append({"row": {"axis": axis, "value": v, "error": f"{type(exc).__name__}: {exc}"},
                         "report": None})
    return rows


# ---------------------------------------------------------------- output

def _json_default(o):
    if isinstance(o, bytes):
        return o.hex()
    raise TypeError(type(o).__name__)


def write_outputs(rows: list[dict], reports: list[Optional[MetricsReport]], outdir: str | Path,
                  name: str) -> tuple[Path, Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.csv"
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    summary = out / f"{name}.summary.json"
    payload = {"name": name, "runs": [rep.to_dict() if rep else None for rep in reports],
               "rows": rows}
    summary.write_text(json.dumps(payload, sort_keys=True, indent=1, default=_json_default) + "\n")
    return csv_path, summary
