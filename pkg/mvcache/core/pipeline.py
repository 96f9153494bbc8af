"""Pipeline module - one frame of sparse inference on one endpoint.

sparse_forward walks the network layer by layer: it builds the
recomputation set S_l, evaluates the layer only at S_l, fills every
other position from the remapped cache and stores the assembled output
as the new cache. Layer l+1 consumes the assembled output of layer l.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from mvcache.core.cache_state import EndpointCache, merge_cache, remap_cache
from mvcache.core.errors import InternalError, InvalidArgumentError
from mvcache.core.motion import MVField, downsample_field, estimate_mv, modal_mv, reset
from mvcache.core.network import NetworkSpec, dense_forward, evaluate_layer, flop_weights
from mvcache.core.reuse import (
    ThresholdVector,
    dispatch_recompute_set,
    propagate_candidates,
    truncate_candidates,
)
from mvcache.core.rfap import (
    InjectionPlan,
    RfapMode,
    merge_rfap,
    receptive_reach,
    rfap_input_check,
    rfap_per_layer_check,
)
from mvcache.core.settings import PipelineOptions, ReuseMode
from mvcache.core.tensor import FeatureMap, RecomputeMask, mask_union, mask_union_all

logger = logging.getLogger(__name__)


@dataclass
class FrameStats:
    """Work accounting of one processed frame.

    Attributes:
        frame_id: Frame index
        input_recomputed: |S_0|
        input_size: Pixels of the input grid
        layer_counts: |S_l| per layer
        layer_sizes: Positions per layer output grid
        evaluated: Positions actually evaluated per layer
        compute_ratio: FLOP-weighted fraction of dense work executed
        reuse_ratio: 1 − |S_0| / N_px
        rfap_flagged: Input pixels flagged by the compacted check
        dense: True when the frame ran as a dense pass
        timings_ms: Wall-clock per stage (diagnostics only)
    """
    frame_id: int
    input_recomputed: int
    input_size: int
    layer_counts: List[int] = field(default_factory=list)
    layer_sizes: List[int] = field(default_factory=list)
    evaluated: List[int] = field(default_factory=list)
    compute_ratio: float = 1.0
    reuse_ratio: float = 0.0
    rfap_flagged: int = 0
    dense: bool = False
    timings_ms: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "input_recomputed": self.input_recomputed,
            "input_size": self.input_size,
            "layer_counts": list(self.layer_counts),
            "layer_sizes": list(self.layer_sizes),
            "evaluated": list(self.evaluated),
            "compute_ratio": self.compute_ratio,
            "reuse_ratio": self.reuse_ratio,
            "rfap_flagged": self.rfap_flagged,
            "dense": self.dense,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FrameStats":
        return cls(
            frame_id=int(data["frame_id"]),
            input_recomputed=int(data["input_recomputed"]),
            input_size=int(data["input_size"]),
            layer_counts=[int(v) for v in data.get("layer_counts", [])],
            layer_sizes=[int(v) for v in data.get("layer_sizes", [])],
            evaluated=[int(v) for v in data.get("evaluated", [])],
            compute_ratio=float(data.get("compute_ratio", 1.0)),
            reuse_ratio=float(data.get("reuse_ratio", 0.0)),
            rfap_flagged=int(data.get("rfap_flagged", 0)),
            dense=bool(data.get("dense", False)),
        )


def compute_ratio(net: NetworkSpec, layer_counts: List[int]) -> float:
    """Σ_l macs_l·|S_l| / Σ_l dense macs_l."""
    weights = flop_weights(net)
    total = float(sum(weights))
    if total == 0:
        return 0.0
    done = sum(
        count * layer.macs_per_position for count, layer in zip(layer_counts, net.layers)
    )
    return min(1.0, done / total)


def _dense_stats(net: NetworkSpec, frame_id: int) -> FrameStats:
    h, w, _ = net.input_shape
    sizes = [shape[0] * shape[1] for shape in net.output_shapes]
    return FrameStats(
        frame_id=frame_id,
        input_recomputed=h * w,
        input_size=h * w,
        layer_counts=list(sizes),
        layer_sizes=list(sizes),
        evaluated=list(sizes),
        compute_ratio=1.0,
        reuse_ratio=0.0,
        dense=True,
    )


def dense_seed(
    net: NetworkSpec,
    cache: EndpointCache,
    frame: FeatureMap,
    frame_id: int,
    s0: Optional[RecomputeMask] = None,
) -> Tuple[FeatureMap, FrameStats]:
    """Dense pass that (re)seeds every cache of the endpoint.

    s0, when given, is the dispatch set the frame arrived with; it only
    affects the reported reuse ratio.
    """
    start = time.perf_counter()
    outputs = dense_forward(net, frame)
    cache.seed(frame, outputs, frame_id)
    stats = _dense_stats(net, frame_id)
    if s0 is not None:
        stats.input_recomputed = s0.count()
        stats.reuse_ratio = 1.0 - s0.count() / float(s0.size)
    stats.timings_ms["infer"] = (time.perf_counter() - start) * 1000.0
    logger.debug(f"{cache.name}: dense seed at frame {frame_id}")
    return outputs[-1], stats


def injection_plan(net: NetworkSpec, cache: EndpointCache, s0: RecomputeMask, rfap: RfapMode) -> InjectionPlan:
    """Run the compacted check on the endpoint's accumulated field."""
    if rfap != RfapMode.COMPACT or not cache.seeded:
        return InjectionPlan.empty()
    flags = rfap_input_check(cache.accum, net.r_max, net.s_max, receptive_reach(net))
    return merge_rfap(s0, flags, net)


def endpoint_recompute_set(
    cache: EndpointCache,
    frame: FeatureMap,
    tau0: float,
    options: PipelineOptions,
) -> RecomputeMask:
    """S_0 of an endpoint for the incoming frame.

    An unseeded endpoint, or a dense mode, recomputes everything.
    """
    h, w, _ = frame.shape
    if not cache.seeded or options.mode.is_dense:
        return RecomputeMask.full(h, w)
    s0 = dispatch_recompute_set(frame, cache.input_cache, cache.accum, tau0)
    if not options.remap and cache.held_masks:
        s0 = mask_union(s0, cache.held_masks[0])
    return s0


def sparse_forward(
    net: NetworkSpec,
    cache: EndpointCache,
    frame: FeatureMap,
    s0: RecomputeMask,
    plan: Optional[InjectionPlan],
    thresholds: ThresholdVector,
    options: Optional[PipelineOptions] = None,
    frame_id: Optional[int] = None,
) -> Tuple[FeatureMap, FrameStats]:
    """Process one frame on an endpoint and update its caches.

    The endpoint's accumulator must already include the current frame's
    motion. Only positions in s0 are read from frame.

    Args:
        net: Network
        cache: Endpoint cache (updated in place)
        frame: Incoming frame I_t
        s0: Dispatch-layer recomputation set
        plan: Compacted RFAP injection plan (None or empty for no injection)
        thresholds: τ_0 and per-layer τ_l
        options: Pipeline options
        frame_id: Frame index recorded in the cache

    Returns:
        (final layer output, FrameStats)

    Raises:
        InvalidArgumentError: If frame or s0 do not match the network input
        InternalError: On inconsistent cache geometry
    """
    options = options or PipelineOptions()
    frame_id = cache.last_update_frame + 1 if frame_id is None else frame_id
    if frame.shape != net.input_shape:
        raise InvalidArgumentError(f"Frame {frame.shape} does not match network input {net.input_shape}")
    if s0.shape != net.input_shape[:2]:
        raise InvalidArgumentError(f"S_0 {s0.shape} does not match input grid {net.input_shape[:2]}")
    if cache.layer_shapes != list(net.output_shapes):
        raise InternalError(f"{cache.name}: cache geometry does not match the network")

    if not cache.seeded:
        return dense_seed(net, cache, frame, frame_id)

    start = time.perf_counter()
    remap = options.remap
    field0 = cache.accum
    held = cache.held_masks if not remap and cache.held_masks else None
    if held is not None:
        s0 = mask_union(s0, held[0])

    if remap:
        base_in, oob_in = remap_cache(cache.input_cache, field0)
    else:
        base_in, oob_in = cache.input_cache, RecomputeMask(~field0.valid)
    s0 = mask_union(s0, oob_in)

    assembled = FeatureMap(np.where(s0.bits[..., None], frame.data, base_in.data))
    # a full S_0 is a re-seed request unless caches stay in stale coordinates
    if not options.sparse or options.mode.is_dense or (remap and s0.all()):
        return dense_seed(net, cache, assembled, frame_id, s0)

    old_in = cache.input_cache
    s_prev = s0
    new_caches: List[FeatureMap] = []
    masks: List[RecomputeMask] = [s0]
    counts: List[int] = []
    sizes: List[int] = []
    evaluated: List[int] = []

    for layer in net.layers:
        index = layer.index
        cs_in = net.cum_stride_before(index)
        cs_out = net.cum_strides[index]
        field_in = downsample_field(field0, cs_in)
        field_out = downsample_field(field0, cs_out)
        old_out = cache.layer_caches[index]

        if remap:
            base_out, forced = remap_cache(old_out, field_out)
        else:
            base_out, forced = old_out, RecomputeMask(~field_out.valid)

        incoming = s_prev
        injected = plan.mask_for(index) if plan is not None else None
        if injected is not None:
            incoming = mask_union(incoming, injected)
        candidates = propagate_candidates(incoming, layer)
        kept = truncate_candidates(
            candidates, assembled, old_in, field_in, layer, thresholds.for_layer(index)
        )

        parts = [kept, forced]
        if options.rfap == RfapMode.PER_LAYER:
            parts.append(rfap_per_layer_check(field_in, field_out, layer))
        if held is not None:
            parts.append(held[index + 1])
        s_l = mask_union_all(parts)

        rows, cols = s_l.positions()
        fresh = evaluate_layer(layer, assembled.data, rows, cols)
        if fresh.shape[0] != s_l.count():
            raise InternalError(f"Layer {index}: evaluated {fresh.shape[0]} of {s_l.count()} positions")
        output = merge_cache(base_out, fresh, s_l)

        new_caches.append(output)
        masks.append(s_l)
        counts.append(s_l.count())
        sizes.append(s_l.size)
        evaluated.append(int(fresh.shape[0]))
        old_in = old_out
        assembled = output
        s_prev = s_l

    cache.input_cache = FeatureMap(np.where(s0.bits[..., None], frame.data, base_in.data))
    cache.layer_caches = new_caches
    cache.last_update_frame = frame_id
    if remap:
        cache.accum = reset(field0)
        cache.held_masks = []
    else:
        cache.held_masks = masks

    h, w = s0.shape
    stats = FrameStats(
        frame_id=frame_id,
        input_recomputed=s0.count(),
        input_size=h * w,
        layer_counts=counts,
        layer_sizes=sizes,
        evaluated=evaluated,
        compute_ratio=compute_ratio(net, counts),
        reuse_ratio=1.0 - s0.count() / float(h * w),
        rfap_flagged=plan.flagged if plan is not None else 0,
    )
    stats.timings_ms["infer"] = (time.perf_counter() - start) * 1000.0
    logger.debug(
        f"{cache.name}: frame {frame_id} |S0|={stats.input_recomputed} "
        f"compute_ratio={stats.compute_ratio:.4f}"
    )
    return assembled, stats


def field_for_mode(mode: ReuseMode, mv: MVField) -> MVField:
    """The motion field a reuse mode works with.

    fixed-coord (and the dense modes) never move the cache; global-shift
    applies the modal block MV to the whole frame.
    """
    if mode == ReuseMode.FLUXSHARD:
        return mv
    if mode == ReuseMode.GLOBAL_SHIFT:
        dy, dx = modal_mv(mv)
        return MVField.uniform(mv.grid_h, mv.grid_w, dy, dx, mv.block_size)
    return MVField.zeros(mv.grid_h, mv.grid_w, mv.block_size)


def step_endpoint(
    net: NetworkSpec,
    cache: EndpointCache,
    frame: FeatureMap,
    mv: MVField,
    thresholds: ThresholdVector,
    options: PipelineOptions,
    frame_id: int,
) -> Tuple[FeatureMap, FrameStats]:
    """Accumulate, build S_0 and the RFAP plan, then run sparse_forward."""
    if cache.seeded:
        cache.advance(field_for_mode(options.mode, mv))
    s0 = endpoint_recompute_set(cache, frame, thresholds.tau0, options)
    plan = injection_plan(net, cache, s0, options.rfap)
    return sparse_forward(net, cache, frame, s0, plan, thresholds, options, frame_id)


def run_baseline(
    mode: ReuseMode,
    net: NetworkSpec,
    cache: EndpointCache,
    frame: FeatureMap,
    mv: MVField,
    thresholds: ThresholdVector,
    options: Optional[PipelineOptions] = None,
    frame_id: int = 0,
) -> Tuple[FeatureMap, FrameStats]:
    """Process a frame with a comparison mode (dense, fixed-coord, global-shift).

    Raises:
        InvalidArgumentError: If mode is not a baseline mode
    """
    if mode == ReuseMode.FLUXSHARD:
        raise InvalidArgumentError("fluxshard is not a baseline mode")
    base = options or PipelineOptions()
    options = base.model_copy(update={"mode": mode})
    return step_endpoint(net, cache, frame, mv, thresholds, options, frame_id)


class StreamProcessor:
    """Runs a frame sequence through one endpoint.

    Motion is estimated against the previous raw frame unless the caller
    passes a field.

    Example:
        >>> proc = StreamProcessor(net, ThresholdVector())
        >>> for frame in frames:
        ...     output, stats = proc.process(frame)
    """

    def __init__(
        self,
        net: NetworkSpec,
        thresholds: ThresholdVector,
        options: Optional[PipelineOptions] = None,
        block_size: int = 16,
        search_radius: int = 8,
        name: str = "edge",
    ) -> None:
        self.net = net
        self.thresholds = thresholds
        self.options = options or PipelineOptions()
        self.block_size = block_size
        self.search_radius = search_radius
        self.cache = EndpointCache.for_network(net, name)
        self._previous: Optional[FeatureMap] = None
        self._frame_id = 0

    @property
    def frame_id(self) -> int:
        return self._frame_id

    def motion(self, frame: FeatureMap) -> MVField:
        """Block field of frame against the previous raw frame."""
        if self._previous is None:
            h, w, _ = frame.shape
            return MVField.zeros(h // self.block_size, w // self.block_size, self.block_size)
        return estimate_mv(frame, self._previous, self.block_size, self.search_radius)

    def process(self, frame: FeatureMap, mv: Optional[MVField] = None) -> Tuple[FeatureMap, FrameStats]:
        if mv is None:
            mv = self.motion(frame)
        output, stats = step_endpoint(
            self.net, self.cache, frame, mv, self.thresholds, self.options, self._frame_id
        )
        self._previous = frame
        self._frame_id += 1
        return output, stats

    def run(self, frames: List[FeatureMap]) -> List[Tuple[FeatureMap, FrameStats]]:
        return [self.process(frame) for frame in frames]
