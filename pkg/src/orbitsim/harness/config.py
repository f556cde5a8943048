"""Experiment configuration: nested YAML blocks mapped onto dataclasses.

Grammar (every field optional except ``seed``)::

    name: fig4
    scheme: orbitcache | netcache | nocache
    seed: 1
    clients: 4
    servers: 32
    server_rate: 100000        # requests/s per server
    offered_load: 2000000      # total client requests/s
    saturate: false            # search for the saturation load instead
    workload: {n_keys, alpha, key_bytes, size_model, p_small, small_value,
               large_value, histogram, write_ratio, pattern, swap_count,
               swap_period_s}
    cache: {size, auto_size, min_size, max_size, threshold, queue_size,
            multi_packet, flush_on_evict, hash_bits, period_s, topk_k,
            fetch_timeout_ms, fetch_retries, preload, controller, mutation,
            netcache_size, netcache_key_limit, netcache_value_limit,
            netcache_keyfile}
    sim: {duration_s, warmup_s, bin_s, recirc_model, recirc_serialized,
          pipeline_delay_ns, link_delay_ns, bandwidth_gbps, loss,
          control_loss, server_queue_capacity, history, trace}
    output: out/fig4

``ORBITSIM_SEED`` and ``ORBITSIM_OUT`` override ``seed`` and ``output``.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the field path."""


@dataclass
class WorkloadConfig:
    n_keys: int = 100_000
    alpha: float = 0.99
    key_bytes: int = 16
    size_model: str = "bimodal"
    p_small: float = 0.82
    small_value: int = 64
    large_value: int = 1024
    histogram: Optional[str] = None
    write_ratio: float = 0.0
    pattern: str = "static"
    swap_count: int = 128
    swap_period_s: float = 10.0


@dataclass
class CacheConfig:
    size: int = 128
    auto_size: bool = False
    min_size: int = 8
    max_size: int = 1024
    threshold: float = 0.01
    queue_size: int = 8
    multi_packet: bool = False
    flush_on_evict: bool = False
    hash_bits: int = 128
    period_s: float = 1.0
    topk_k: Optional[int] = None
    fetch_timeout_ms: float = 10.0
    fetch_retries: int = 5
    preload: bool = True
    controller: bool = True
    mutation: Optional[str] = None
    netcache_size: int = 1000
    netcache_key_limit: int = 16
    netcache_value_limit: int = 64
    netcache_keyfile: Optional[str] = None


@dataclass
class SimConfig:
    duration_s: float = 0.1
    warmup_s: float = 0.02
    bin_s: float = 0.1
    recirc_model: str = "rotation"
    recirc_serialized: bool = False
    pipeline_delay_ns: float = 400.0
    link_delay_ns: float = 1000.0
    bandwidth_gbps: float = 100.0
    loss: float = 0.0
    control_loss: float = 0.0
    server_queue_capacity: Optional[int] = None
    history: bool = False
    trace: Optional[str] = None


@dataclass
class ExperimentConfig:
    seed: int
    name: str = "experiment"
    scheme: str = "orbitcache"
    clients: int = 4
    servers: int = 32
    server_rate: float = 100_000.0
    offered_load: float = 1_000_000.0
    saturate: bool = False
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    output: Optional[str] = None

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"cache.size": 64})``."""
        d = to_dict(self)
        for path, value in changes.items():
            node = d
            parts = path.split(".")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = value
        return from_dict(d)


SCHEMES = ("orbitcache", "netcache", "nocache")
_CHOICES = {
    "scheme": SCHEMES,
    "workload.size_model": ("point", "bimodal", "histogram"),
    "workload.pattern": ("static", "hot-in"),
    "sim.recirc_model": ("fifo", "rotation"),
    "cache.mutation": (None, "skip-invalidate", "skip-drop-invalid", "validate-on-write-request"),
}


def _coerce(value: Any, tp, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _build(tp, value, path + ".")
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in known:
            raise ConfigError(f"{prefix}{k}: unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], prefix + f.name)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{prefix}{f.name}: required field missing")
    return cls(**kwargs)


def _check(cfg: ExperimentConfig) -> None:
    for path, allowed in _CHOICES.items():
        node: Any = cfg
        for p in path.split("."):
            node = getattr(node, p)
        if node not in allowed:
            raise ConfigError(f"{path}: must be one of {[a for a in allowed if a]}, got {node!r}")

    def need(cond: bool, path: str, msg: str) -> None:
        if not cond:
            raise ConfigError(f"{path}: {msg}")

    need(cfg.clients >= 1, "clients", "must be >= 1")
    need(cfg.servers >= 1, "servers", "must be >= 1")
    need(cfg.server_rate > 0, "server_rate", "must be positive")
    need(cfg.offered_load > 0, "offered_load", "must be positive")
    w, c, s = cfg.workload, cfg.cache, cfg.sim
    need(w.n_keys >= 1, "workload.n_keys", "must be >= 1")
    need(w.alpha >= 0, "workload.alpha", "must be >= 0")
    need(0 <= w.write_ratio <= 1, "workload.write_ratio", "must be in [0, 1]")
    need(0 <= w.p_small <= 1, "workload.p_small", "must be in [0, 1]")
    need(w.key_bytes >= len(str(w.n_keys - 1)), "workload.key_bytes",
         "too short to name every key")
    need(w.size_model != "histogram" or w.histogram is not None, "workload.histogram",
         "required when size_model is histogram")
    need(w.swap_count * 2 <= w.n_keys, "workload.swap_count", "must be at most n_keys/2")
    need(c.size >= 0, "cache.size", "must be >= 0")
    need(c.queue_size >= 1, "cache.queue_size", "must be >= 1")
    need(1 <= c.hash_bits <= 128, "cache.hash_bits", "must be in [1, 128]")
    need(c.min_size <= c.max_size, "cache.min_size", "must not exceed cache.max_size")
    need(not c.auto_size or c.min_size <= c.size <= c.max_size, "cache.size",
         "must lie in [min_size, max_size] with auto_size")
    need(c.period_s > 0, "cache.period_s", "must be positive")
    need(s.duration_s > 0, "sim.duration_s", "must be positive")
    need(0 <= s.warmup_s < s.duration_s, "sim.warmup_s", "must be in [0, duration_s)")
    need(0 <= s.loss < 1, "sim.loss", "must be in [0, 1)")
    need(0 <= s.control_loss <= 1, "sim.control_loss", "must be in [0, 1]")
    need(s.bandwidth_gbps > 0, "sim.bandwidth_gbps", "must be positive")


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: expected a mapping")
    cfg = _build(ExperimentConfig, data)
    _check(cfg)
    return cfg


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def load(path: str | Path, env: Optional[dict] = None) -> ExperimentConfig:
    env = os.environ if env is None else env
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"<file>: YAML syntax error: {exc}") from None
    data = dict(data or {})
    if "ORBITSIM_SEED" in env:
        try:
            data["seed"] = int(env["ORBITSIM_SEED"])
        except ValueError:
            raise ConfigError("seed: ORBITSIM_SEED is not an integer") from None
    if "ORBITSIM_OUT" in env:
        data["output"] = env["ORBITSIM_OUT"]
    return from_dict(data)
