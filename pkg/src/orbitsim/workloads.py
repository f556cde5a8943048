"""Key popularity, item sizes, dynamic patterns and the cacheability analyzer.

Items are numbered ``0 .. n-1``. At rest, item ``r-1`` holds popularity
rank ``r`` (item 0 is the hottest); a ``DynamicPattern`` changes that
mapping over time. Keys are fixed-width decimal strings of the item number.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .messages import MAX_ITEM_BYTES, hash_key, partition


# ----------------------------------------------------------------- zipf

@lru_cache(maxsize=8)
def zipf_cdf(n: int, alpha: float) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one key")
    w = np.arange(1, n + 1, dtype=np.float64) ** -float(alpha)
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    cdf.setflags(write=False)
    return cdf


def zipf_pmf(n: int, alpha: float) -> np.ndarray:
    cdf = zipf_cdf(n, alpha)
    return np.diff(cdf, prepend=0.0)


class ZipfGen:
    """Seeded Zipf rank sampler; ranks are 1-based."""

    def __init__(self, n: int, alpha: float, rng: np.random.Generator | int | None = None,
                 batch: int = 4096) -> None:
        self.n = n
        self.alpha = alpha
        self.cdf = zipf_cdf(n, alpha)
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.batch = batch
        self._buf: list[int] = []

    def sample(self, size: int) -> np.ndarray:
        u = self.rng.random(size)
        r = np.searchsorted(self.cdf, u, side="right") + 1
        return np.minimum(r, self.n)

    def next(self) -> int:
        if not self._buf:
            self._buf = self.sample(self.batch).tolist()[::-1]
        return self._buf.pop()


# ----------------------------------------------------------------- sizes

@dataclass
class SizeModel:
    """Value-size rule; keys are always ``key_bytes`` long.

    kind: ``point`` (always ``small``), ``bimodal`` (``small`` with probability
    ``p_small``, else ``large``) or ``histogram`` (``hist`` of (size, prob)).
    """

    kind: str = "bimodal"
    key_bytes: int = 16
    small: int = 64
    large: int = 1024
    p_small: float = 0.82
    hist: Sequence[tuple[int, float]] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("point", "bimodal", "histogram"):
            raise ValueError(f"unknown size model {self.kind!r}")
        if self.kind == "histogram":
            if not self.hist:
                raise ValueError("histogram size model needs at least one bin")
            if any(p < 0 for _, p in self.hist) or sum(p for _, p in self.hist) <= 0:
                raise ValueError("histogram probabilities must be non-negative and not all zero")
        if not 0.0 <= self.p_small <= 1.0:
            raise ValueError("p_small must be in [0, 1]")

    def _table(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "point":
            return np.array([self.small]), np.array([1.0])
        if self.kind == "bimodal":
            return np.array([self.small, self.large]), np.array([self.p_small, 1 - self.p_small])
        sizes = np.array([s for s, _ in self.hist])
        p = np.array([q for _, q in self.hist], dtype=float)
        return sizes, p / p.sum()

    def sample_value_size(self, rng: np.random.Generator, size: Optional[int] = None):
        sizes, p = self._table()
        idx = rng.choice(len(sizes), size=size, p=p)
        return sizes[idx] if size is not None else int(sizes[idx])

    def assign(self, n: int, rng: np.random.Generator, block: int = 1000) -> np.ndarray:
        """Per-item value sizes.

        Items are split into consecutive blocks of ``block``; each block gets
        exact (largest-remainder) proportions, shuffled inside the block. The
        hottest ``block`` items therefore hold exactly the model's mix.
        """
        sizes, p = self._table()
        out = np.empty(n, dtype=np.int32)
        for start in range(0, n, block):
            m = min(block, n - start)
            counts = np.floor(p * m).astype(int)
            rest = m - counts.sum()
            if rest:
                order = np.argsort(-(p * m - counts), kind="stable")
                counts[order[:rest]] += 1
            chunk = np.repeat(sizes, counts).astype(np.int32)
            rng.shuffle(chunk)
            out[start:start + m] = chunk
        return out


def load_histogram(path: str | Path) -> list[tuple[int, float]]:
    """Two-column text file: ``size_bytes probability`` per line; ``#`` starts a comment."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected two columns")
        rows.append((int(parts[0]), float(parts[1])))
    if not rows:
        raise ValueError(f"{path}: empty histogram")
    return rows


def cacheable_ratio(sizes: Iterable[tuple[int, int]], key_limit: int, value_limit: int) -> float:
    if key_limit <= 0 or value_limit <= 0:
        raise ValueError("limits must be positive")
    total = ok = 0
    for k, v in sizes:
        total += 1
        if k <= key_limit and v <= value_limit:
            ok += 1
    return ok / total if total else 0.0


def sample_op(rng, write_ratio: float) -> str:
    return "W" if rng.random() < write_ratio else "R"


# ----------------------------------------------------------------- dynamics

@dataclass
class DynamicPattern:
    kind: str = "static"
    swap_count: int = 128
    period_s: float = 10.0

    def __post_init__(self) -> None:
        if self.kind not in ("static", "hot-in"):
            raise ValueError(f"unknown dynamic pattern {self.kind!r}")

    def swapped(self, now_ns: float) -> bool:
        return self.kind == "hot-in" and int(now_ns // (self.period_s * 1e9)) % 2 == 1

    def item_of(self, rank: int, n: int, now_ns: float) -> int:
        """Item holding popularity ``rank`` at ``now_ns``.

        During swapped epochs the ``swap_count`` hottest and coldest ranks
        trade places (rank r <-> rank n+1-r).
        """
        if self.swapped(now_ns) and (rank <= self.swap_count or rank > n - self.swap_count):
            return n - rank
        return rank - 1


# ----------------------------------------------------------------- catalog

def key_name(item: int, key_bytes: int = 16) -> bytes:
    return f"{item:0{key_bytes}d}".encode()


def item_of_key(key: bytes) -> int:
    return int(key)


def _pad(tag: bytes, size: int) -> bytes:
    if len(tag) >= size:
        return tag
    return tag + b"." * (size - len(tag))


@dataclass
class Workload:
    """The key space and everything clients need to issue requests."""

    n_keys: int = 100_000
    alpha: float = 0.99
    sizes: SizeModel = field(default_factory=SizeModel)
    write_ratio: float = 0.0
    pattern: DynamicPattern = field(default_factory=DynamicPattern)
    n_servers: int = 32
    hash_bits: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.write_ratio <= 1.0:
            raise ValueError("write_ratio must be in [0, 1]")
        self.value_sizes = self.sizes.assign(self.n_keys, np.random.default_rng([self.seed, 7]))
        self._meta: dict[int, tuple[bytes, int, int]] = {}

    def meta(self, item: int) -> tuple[bytes, int, int]:
        """(key, hkey at the configured width, home server) for ``item``."""
        m = self._meta.get(item)
        if m is None:
            key = key_name(item, self.sizes.key_bytes)
            m = (key, hash_key(key, self.hash_bits), partition(key, self.n_servers))
            self._meta[item] = m
        return m

    def value_size(self, item: int) -> int:
        return int(self.value_sizes[item])

    def initial_value(self, key: bytes) -> bytes:
        return self._value(key, b"v0")

    def write_value(self, item: int, client: int, seq: int) -> bytes:
        key = self.meta(item)[0]
        return self._value(key, b"c%ds%d" % (client, seq))

    def _value(self, key: bytes, tag: bytes) -> bytes:
        size = self.value_size(item_of_key(key))
        v = _pad(key + b"|" + tag + b"|", size)
        if len(key) + len(v) > MAX_ITEM_BYTES:
            v = v[:MAX_ITEM_BYTES - len(key)]
        return v

    def hottest(self, count: int, now_ns: float = 0.0) -> list[int]:
        return [self.pattern.item_of(r, self.n_keys, now_ns) for r in range(1, min(count, self.n_keys) + 1)]

    def item_sizes(self) -> Iterable[tuple[int, int]]:
        kb = self.sizes.key_bytes
        return ((kb, int(v)) for v in self.value_sizes)


def value_matches_key(key: bytes, value: bytes) -> bool:
    """True if ``value`` was produced for ``key`` by this module."""
    return value.startswith(key + b"|")
