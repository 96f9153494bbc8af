"""Cache state module - per-endpoint feature caches.

Each endpoint (edge, cloud, and the client's replica of the cloud)
owns an EndpointCache: the cached input F̂0, one cached output per
layer, and the accumulated MV field that maps current positions back
into the cache's coordinate system.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from mvcache.core.errors import InternalError, InvalidArgumentError
from mvcache.core.motion import AccumMV, MVField, accumulate, warp_backward
from mvcache.core.network import NetworkSpec
from mvcache.core.tensor import FeatureMap, RecomputeMask

logger = logging.getLogger(__name__)

NEVER = -1


@dataclass(eq=False)
class EndpointCache:
    """Cached features of one endpoint.

    Attributes:
        name: Label used in logs ("edge", "cloud", "replica")
        input_shape: Network input (h, w, c)
        layer_shapes: Output shape per layer
        input_cache: Cached input F̂0, None before the first frame
        layer_caches: Cached output per layer (empty before the first frame)
        accum: Accumulated MV field at input resolution
        last_update_frame: Frame id of the last processed frame, -1 if none
        held_masks: Recomputation sets carried across frames when caches are
            not remapped (dispatch layer first), empty otherwise

    Example:
        >>> cache = EndpointCache.for_network(net, "edge")
        >>> cache.seeded
        False
    """
    name: str
    input_shape: Tuple[int, int, int]
    layer_shapes: List[Tuple[int, int, int]]
    input_cache: Optional[FeatureMap] = None
    layer_caches: List[FeatureMap] = field(default_factory=list)
    accum: Optional[AccumMV] = None
    last_update_frame: int = NEVER
    held_masks: List[RecomputeMask] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.accum is None:
            self.accum = AccumMV.zeros(*self.input_shape[:2])

    @classmethod
    def for_network(cls, net: NetworkSpec, name: str = "edge") -> "EndpointCache":
        return cls(name=name, input_shape=net.input_shape, layer_shapes=list(net.output_shapes))

    @property
    def seeded(self) -> bool:
        return self.input_cache is not None and len(self.layer_caches) == len(self.layer_shapes)

    def seed(self, frame: FeatureMap, outputs: List[FeatureMap], frame_id: int) -> None:
        """Fill every cache from a dense pass."""
        if frame.shape != self.input_shape:
            raise InternalError(f"{self.name}: seed frame {frame.shape} vs {self.input_shape}")
        if [o.shape for o in outputs] != self.layer_shapes:
            raise InternalError(f"{self.name}: seed outputs do not match layer shapes")
        self.input_cache = frame.copy()
        self.layer_caches = [o.copy() for o in outputs]
        self.accum = AccumMV.zeros(*self.input_shape[:2])
        self.last_update_frame = frame_id
        self.held_masks = []

    def invalidate(self) -> None:
        """Drop all cached state; the next frame on this endpoint is dense."""
        logger.info(f"Invalidating {self.name} cache (last frame {self.last_update_frame})")
        self.input_cache = None
        self.layer_caches = []
        self.accum = AccumMV.zeros(*self.input_shape[:2])
        self.last_update_frame = NEVER
        self.held_masks = []

    def advance(self, mv: MVField) -> None:
        """Compose a new per-frame field into the accumulator."""
        self.accum = accumulate(self.accum, mv)

    def copy(self) -> "EndpointCache":
        return EndpointCache(
            name=self.name,
            input_shape=self.input_shape,
            layer_shapes=list(self.layer_shapes),
            input_cache=self.input_cache.copy() if self.input_cache is not None else None,
            layer_caches=[c.copy() for c in self.layer_caches],
            accum=self.accum.copy(),
            last_update_frame=self.last_update_frame,
            held_masks=[RecomputeMask(m.bits.copy()) for m in self.held_masks],
        )

    def restore(self, other: "EndpointCache") -> None:
        """Overwrite this cache's state with other's (same geometry)."""
        if other.input_shape != self.input_shape or other.layer_shapes != self.layer_shapes:
            raise InternalError(f"{self.name}: cannot restore a cache of different geometry")
        self.input_cache = other.input_cache
        self.layer_caches = other.layer_caches
        self.accum = other.accum
        self.last_update_frame = other.last_update_frame
        self.held_masks = other.held_masks

    def arrays(self) -> Dict[str, np.ndarray]:
        """Named arrays of the cache (for snapshots and audits)."""
        out: Dict[str, np.ndarray] = {
            "accum_dy": self.accum.dy,
            "accum_dx": self.accum.dx,
            "accum_valid": self.accum.valid.astype(np.uint8),
        }
        if self.input_cache is not None:
            out["input"] = self.input_cache.data
        for index, cached in enumerate(self.layer_caches):
            out[f"layer_{index:02d}"] = cached.data
        return out

    def max_divergence(self, other: "EndpointCache") -> float:
        """Largest absolute difference between two caches' features.

        Returns inf when one side is seeded and the other is not.
        """
        if self.seeded != other.seeded:
            return float("inf")
        if not self.seeded:
            return 0.0
        if self.accum != other.accum:
            return float("inf")
        worst = float(np.abs(self.input_cache.data - other.input_cache.data).max())
        for a, b in zip(self.layer_caches, other.layer_caches):
            worst = max(worst, float(np.abs(a.data - b.data).max()))
        return worst


def remap_cache(cache_l: FeatureMap, field_l: AccumMV) -> Tuple[FeatureMap, RecomputeMask]:
    """Warp a cached map into the current frame; oob positions must be recomputed."""
    return warp_backward(cache_l, field_l)


def merge_cache(remapped: FeatureMap, fresh: np.ndarray, mask: RecomputeMask) -> FeatureMap:
    """Overwrite recomputed positions with fresh values.

    Args:
        remapped: Remapped (or stale) cache
        fresh: (|S|, C) values for set positions in row-major order
        mask: Recomputation set S_l

    Returns:
        New map: fresh at S_l, remapped elsewhere

    Raises:
        InvalidArgumentError: If the mask grid does not match the map
        InternalError: If fresh does not provide one row per set position
    """
    if mask.shape != (remapped.height, remapped.width):
        raise InvalidArgumentError(
            f"Mask {mask.shape} does not match map {remapped.height}x{remapped.width}"
        )
    count = mask.count()
    if fresh.shape != (count, remapped.channels):
        raise InternalError(
            f"Fresh values {fresh.shape} do not cover {count} positions x {remapped.channels} channels"
        )
    out = remapped.data.copy()
    out[mask.bits] = fresh
    return FeatureMap(out)
