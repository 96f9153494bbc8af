"""Link module - trace-driven uplink simulator.

A bandwidth trace is a piecewise-constant list of (t_ms, bps) samples.
Sample i holds from t_i until t_{i+1}; the last one holds for the
previous step, after which the trace wraps around.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from mvcache.core.errors import InvalidArgumentError
from mvcache.core.settings import LinkConfig

logger = logging.getLogger(__name__)

MBPS = 1e6
FLOOR_BPS = 1.0 * MBPS

# (mean, std) in Mbps
BANDWIDTH_TIERS: Dict[str, Tuple[float, float]] = {
    "low": (40.4, 36.6),
    "medium": (382.8, 419.1),
    "high": (596.9, 467.9),
}


class BandwidthTrace:
    """Cyclic piecewise-constant bandwidth samples.

    Example:
        >>> trace = BandwidthTrace([0.0, 50.0], [40e6, 596.9e6])
        >>> trace.bandwidth_at(60.0)
        596900000.0
    """

    def __init__(self, times_ms, bps) -> None:
        times = np.asarray(times_ms, dtype=np.float64)
        rates = np.asarray(bps, dtype=np.float64)
        if times.ndim != 1 or times.shape != rates.shape or times.size == 0:
            raise InvalidArgumentError("Trace needs matching, non-empty time and bandwidth columns")
        if times[0] != 0.0:
            raise InvalidArgumentError(f"Trace must start at t=0, got {times[0]}")
        if np.any(np.diff(times) <= 0):
            raise InvalidArgumentError("Trace times must be strictly ascending")
        if np.any(rates <= 0) or not np.all(np.isfinite(rates)):
            raise InvalidArgumentError("Trace bandwidth samples must be positive and finite")
        self.times_ms = times
        self.bps = rates

    @classmethod
    def constant(cls, bps: float) -> "BandwidthTrace":
        return cls([0.0], [bps])

    @property
    def period_ms(self) -> float:
        if self.times_ms.size == 1:
            return math.inf
        return float(self.times_ms[-1] + (self.times_ms[-1] - self.times_ms[-2]))

    @property
    def mean_bps(self) -> float:
        """Time-weighted mean over one period."""
        if self.times_ms.size == 1:
            return float(self.bps[0])
        spans = np.diff(np.append(self.times_ms, self.period_ms))
        return float(np.dot(spans, self.bps) / self.period_ms)

    def _locate(self, t_ms: float) -> Tuple[int, float, float]:
        """(sample index, wrapped time, time the sample ends) for t_ms."""
        period = self.period_ms
        if math.isinf(period):
            return 0, t_ms, math.inf
        base = math.floor(t_ms / period) * period
        local = t_ms - base
        index = int(np.searchsorted(self.times_ms, local, side="right")) - 1
        index = min(max(index, 0), self.times_ms.size - 1)
        end = self.times_ms[index + 1] if index + 1 < self.times_ms.size else period
        return index, local, base + float(end)

    def bandwidth_at(self, t_ms: float) -> float:
        if t_ms < 0:
            raise InvalidArgumentError(f"Negative trace time {t_ms}")
        index, _, _ = self._locate(t_ms)
        return float(self.bps[index])

    def drain_ms(self, n_bytes: int, start_ms: float) -> float:
        """Time to push n_bytes starting at start_ms, without propagation."""
        if n_bytes < 0:
            raise InvalidArgumentError(f"Negative transfer size {n_bytes}")
        if start_ms < 0:
            raise InvalidArgumentError(f"Negative trace time {start_ms}")
        remaining = float(n_bytes) * 8.0
        if remaining == 0:
            return 0.0
        period = self.period_ms
        if math.isinf(period):
            return remaining / float(self.bps[0]) * 1000.0

        t = float(start_ms)
        index, local, _ = self._locate(t)
        cycle_start = t - local
        n = self.times_ms.size
        while True:
            rate = float(self.bps[index])
            end = float(self.times_ms[index + 1]) if index + 1 < n else period
            seg_end = cycle_start + end
            capacity = rate * max(seg_end - t, 0.0) / 1000.0
            if remaining <= capacity:
                t += remaining / rate * 1000.0
                break
            remaining -= capacity
            t = max(t, seg_end)
            index += 1
            if index == n:
                index = 0
                cycle_start += period
        return t - float(start_ms)

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["t_ms", "bps"])
            for t, b in zip(self.times_ms, self.bps):
                writer.writerow([repr(float(t)), repr(float(b))])


def load_trace(path: Union[str, Path]) -> BandwidthTrace:
    """Read a `t_ms,bps` CSV (header optional).

    Raises:
        InvalidArgumentError: On malformed rows or non-positive samples
    """
    times, rates = [], []
    with open(path, newline="", encoding="utf-8") as f:
        for row_no, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if row_no == 1 and row[0].strip() == "t_ms":
                continue
            if len(row) != 2:
                raise InvalidArgumentError(f"{path}: row {row_no} needs 2 columns, got {len(row)}")
            try:
                times.append(float(row[0]))
                rates.append(float(row[1]))
            except ValueError:
                raise InvalidArgumentError(f"{path}: row {row_no} is not numeric: {row}")
    return BandwidthTrace(times, rates)


def generate_tier_trace(
    tier: str,
    duration_ms: float = 60_000.0,
    step_ms: float = 100.0,
    seed: int = 0,
) -> BandwidthTrace:
    """Gaussian samples with a tier's mean/std, clipped at 1 Mbps.

    Raises:
        InvalidArgumentError: On an unknown tier or bad step
    """
    if tier not in BANDWIDTH_TIERS:
        raise InvalidArgumentError(f"Unknown bandwidth tier '{tier}', expected one of {sorted(BANDWIDTH_TIERS)}")
    if step_ms <= 0 or duration_ms < step_ms:
        raise InvalidArgumentError(f"Bad trace geometry: duration {duration_ms} ms, step {step_ms} ms")
    mean, std = BANDWIDTH_TIERS[tier]
    count = int(duration_ms // step_ms)
    rng = np.random.default_rng(seed)
    samples = np.maximum(rng.normal(mean, std, size=count) * MBPS, FLOOR_BPS)
    return BandwidthTrace(np.arange(count) * step_ms, samples)


class LinkSim:
    """Uplink with a bandwidth trace and a fixed one-way delay.

    Example:
        >>> link = LinkSim(BandwidthTrace.constant(80e6))
        >>> link.transfer_time(1_000_000, 0.0)
        120.0
    """

    def __init__(self, trace: BandwidthTrace, propagation_ms: float = 20.0) -> None:
        if propagation_ms < 0:
            raise InvalidArgumentError(f"Negative propagation delay {propagation_ms}")
        self.trace = trace
        self.propagation_ms = propagation_ms
        self.cursor_ms = 0.0

    def transfer_time(self, n_bytes: int, start_ms: Optional[float] = None) -> float:
        """Realized one-way time of n_bytes sent at start_ms (default: cursor)."""
        start = self.cursor_ms if start_ms is None else start_ms
        return self.trace.drain_ms(n_bytes, start) + self.propagation_ms

    def send(self, n_bytes: int, start_ms: float) -> Tuple[float, Optional[float]]:
        """Transmit and advance the cursor.

        Returns:
            (realized ms, observed throughput in bps or None for empty sends)
        """
        drain = self.trace.drain_ms(n_bytes, start_ms)
        self.cursor_ms = start_ms + drain
        observed = n_bytes * 8.0 / (drain / 1000.0) if n_bytes > 0 and drain > 0 else None
        return drain + self.propagation_ms, observed

    def probe(self, t_ms: float) -> float:
        return self.trace.bandwidth_at(t_ms)


def transfer_time(link: LinkSim, n_bytes: int, start_ms: float) -> float:
    return link.transfer_time(n_bytes, start_ms)


def build_link(config: LinkConfig, default_bps: float = 596.9 * MBPS, seed: int = 0) -> LinkSim:
    """LinkSim from a LinkConfig: trace file, generated tier, or constant."""
    if config.trace_path:
        trace = load_trace(config.trace_path)
    elif config.tier:
        trace = generate_tier_trace(config.tier, seed=seed)
    else:
        trace = BandwidthTrace.constant(default_bps)
    logger.debug(f"Link: mean {trace.mean_bps / MBPS:.1f} Mbps, propagation {config.propagation_ms} ms")
    return LinkSim(trace, config.propagation_ms)
