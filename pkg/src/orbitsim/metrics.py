"""Windowed counters and per-bin time series shared by simulation entities."""

from __future__ import annotations

from collections import defaultdict


class Recorder:
    """Counts named events inside the measurement window and per time bin.

    The window is ``[warmup_ns, end_ns)``; bins cover the whole run.
    """

    def __init__(self, warmup_ns: float = 0.0, end_ns: float = float("inf"),
                 bin_ns: float = 1e8) -> None:
        self.warmup = warmup_ns
        self.end = end_ns
        self.bin_ns = bin_ns
        self.window: dict[str, float] = defaultdict(float)
        self.bins: dict[str, dict[int, float]] = defaultdict(lambda: defaultdict(float))
        self.totals: dict[str, float] = defaultdict(float)

    def hit(self, name: str, t: float, n: float = 1) -> None:
        self.totals[name] += n
        self.bins[name][int(t // self.bin_ns)] += n
        if self.warmup <= t < self.end:
            self.window[name] += n

    @property
    def window_s(self) -> float:
        return (self.end - self.warmup) / 1e9

    def rate(self, name: str) -> float:
        """Events per simulated second inside the window."""
        return self.window.get(name, 0.0) / self.window_s

    def series(self, name: str, n_bins: int) -> list[float]:
        b = self.bins.get(name, {})
        return [b.get(i, 0.0) for i in range(n_bins)]
