"""Profiling service - latency-vs-sparsity sweeps.

Each sweep point forces a dispatch-layer recomputation set of the
requested density onto a seeded cache and runs one sparse frame. The
point's latency is either the measured wall clock or a model time that
scales an endpoint's dense latency by the executed compute ratio.
"""

import logging
import time
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mvcache.core.cache_state import EndpointCache
from mvcache.core.errors import InvalidArgumentError
from mvcache.core.network import NetworkSpec
from mvcache.core.pipeline import dense_seed, sparse_forward
from mvcache.core.reuse import ThresholdVector
from mvcache.core.settings import PipelineOptions
from mvcache.core.tensor import FeatureMap, RecomputeMask
from mvcache.services.dispatch import DEFAULT_CLOUD_POINTS, DEFAULT_EDGE_POINTS, LatencyModel

logger = logging.getLogger(__name__)

DEFAULT_RHOS = [0.0, 0.25, 0.5, 0.75, 1.0]
ENDPOINT_POINTS = {"edge": DEFAULT_EDGE_POINTS, "cloud": DEFAULT_CLOUD_POINTS}


class ProfileSource(str, Enum):
    WALLCLOCK = "wallclock"
    MODEL = "model"


def forced_mask(height: int, width: int, rho: float, rng: np.random.Generator) -> RecomputeMask:
    """A mask with exactly round(rho·H·W) set positions."""
    if not 0.0 <= rho <= 1.0:
        raise InvalidArgumentError(f"rho must lie in [0, 1], got {rho}")
    n = height * width
    count = int(round(rho * n))
    bits = np.zeros(n, dtype=bool)
    bits[rng.permutation(n)[:count]] = True
    return RecomputeMask(bits.reshape(height, width))


def profile_endpoint(
    net: NetworkSpec,
    rhos: Sequence[float] = tuple(DEFAULT_RHOS),
    source: ProfileSource = ProfileSource.MODEL,
    endpoint: str = "edge",
    repeats: int = 1,
    seed: int = 0,
    monotone: bool = False,
    dense_ms: Optional[float] = None,
    overhead_ms: Optional[float] = None,
) -> List[Tuple[float, float]]:
    """Sweep forced S_0 densities.

    Args:
        net: Network to profile
        rhos: Densities to sweep, ascending
        source: Wall clock or model times
        endpoint: "edge" or "cloud" (default model endpoints)
        repeats: Frames per point (wall clock is averaged)
        seed: Frame and mask seed
        monotone: Apply a running-max envelope
        dense_ms: Model latency at full density (endpoint default if None)
        overhead_ms: Model latency at zero density (endpoint default if None)

    Returns:
        (rho, latency_ms) per point

    Raises:
        InvalidArgumentError: On an unknown endpoint, bad rhos or repeats
    """
    if endpoint not in ENDPOINT_POINTS:
        raise InvalidArgumentError(f"Unknown endpoint '{endpoint}', expected edge or cloud")
    if repeats < 1:
        raise InvalidArgumentError(f"repeats must be >= 1, got {repeats}")
    rhos = [float(r) for r in rhos]
    if any(b <= a for a, b in zip(rhos, rhos[1:])):
        raise InvalidArgumentError(f"rhos must be strictly ascending: {rhos}")
    defaults = ENDPOINT_POINTS[endpoint]
    overhead = defaults[0][1] if overhead_ms is None else overhead_ms
    dense = defaults[-1][1] if dense_ms is None else dense_ms

    rng = np.random.default_rng(seed)
    h, w, c = net.input_shape
    base = FeatureMap(rng.random((h, w, c), dtype=np.float32))
    thresholds = ThresholdVector.zeros(net.profiled_layers)
    options = PipelineOptions()

    points: List[Tuple[float, float]] = []
    for rho in rhos:
        elapsed: List[float] = []
        ratios: List[float] = []
        for _ in range(repeats):
            cache = EndpointCache.for_network(net, "profile")
            dense_seed(net, cache, base, 0)
            mask = forced_mask(h, w, rho, rng)
            frame = FeatureMap(np.where(mask.bits[..., None], base.data + np.float32(0.5), base.data))
            start = time.perf_counter()
            _, stats = sparse_forward(net, cache, frame, mask, None, thresholds, options, 1)
            elapsed.append((time.perf_counter() - start) * 1000.0)
            ratios.append(stats.compute_ratio)
        if source == ProfileSource.WALLCLOCK:
            latency = float(np.mean(elapsed))
        else:
            latency = overhead + (dense - overhead) * float(np.mean(ratios))
        points.append((rho, latency))
        logger.debug(f"Profile {endpoint} rho={rho:.3f}: {latency:.3f} ms")

    if monotone:
        running = np.maximum.accumulate([p[1] for p in points])
        points = [(rho, float(v)) for (rho, _), v in zip(points, running)]
    return points


def profile_model(points: List[Tuple[float, float]]) -> LatencyModel:
    return LatencyModel(points)
