"""RFAP module - receptive-field alignment checks on accumulated MV fields.

MV-aligned reuse of a cached output is only sound when every input of
its receptive field moved by the same displacement (uniformity) and that
displacement survives the division by the layer's stride (coherence).
The compacted check tests both conditions once at input resolution with
the network-wide R_max and S_max; the per-layer check tests them at
every layer and is kept for ablations.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np

from mvcache.core.errors import InvalidArgumentError
from mvcache.core.motion import AccumMV, downsample_field
from mvcache.core.network import LayerSpec, NetworkSpec
from mvcache.core.tensor import RecomputeMask, window_reduce

logger = logging.getLogger(__name__)


class RfapMode(str, Enum):
    COMPACT = "compact"
    PER_LAYER = "per-layer"
    OFF = "off"


@dataclass(eq=False)
class InjectionPlan:
    """Where and what the compacted check adds to the candidate sets.

    The check runs once at input resolution. Its flags are injected at the
    first spatial layer and carried, OR-reduced to each later spatial
    layer's input grid, into that layer's candidates as well.

    Attributes:
        layer_index: First spatial layer, None when the network has none
        masks: Flags per spatial layer index, on that layer's input grid
        flagged: Number of input pixels flagged by the check
    """
    layer_index: Optional[int]
    masks: Dict[int, RecomputeMask] = field(default_factory=dict)
    flagged: int = 0

    @classmethod
    def empty(cls) -> "InjectionPlan":
        return cls(None, {}, 0)

    @property
    def mask(self) -> Optional[RecomputeMask]:
        """Flags at the first spatial layer."""
        if self.layer_index is None:
            return None
        return self.masks.get(self.layer_index)

    def mask_for(self, index: int) -> Optional[RecomputeMask]:
        return self.masks.get(index)

    def is_empty(self) -> bool:
        return self.flagged == 0


def _window_not_uniform(mv: AccumMV, kernel: int, pad: int, stride: int, out_shape) -> np.ndarray:
    """True where (dy, dx, valid) is not constant over the window.

    Out-of-frame samples count as a valid zero displacement.
    """
    result = np.zeros(out_shape, dtype=bool)
    for values, fill in ((mv.dy, 0.0), (mv.dx, 0.0), (mv.valid, 1.0)):
        as_float = values.astype(np.float64)
        hi = window_reduce(as_float, kernel, pad, stride, out_shape, np.max, fill)
        lo = window_reduce(as_float, kernel, pad, stride, out_shape, np.min, fill)
        result |= hi != lo
    return result


def receptive_reach(net: NetworkSpec) -> Tuple[int, int]:
    """Pixels an output anchor sees before and after itself at the input.

    Equal to (⌊R_max/2⌋, ⌊R_max/2⌋) when every kernel is odd; even
    kernels lean forward.
    """
    before = after = 0
    for layer in net.layers:
        cs = net.cum_stride_before(layer.index)
        before += layer.pad * cs
        after += (layer.kernel_size - 1 - layer.pad) * cs
    return before, after


def rfap_input_check(
    accum: AccumMV,
    r_max: int,
    s_max: int,
    reach: Optional[Tuple[int, int]] = None,
) -> RecomputeMask:
    """Compacted input-level check.

    A pixel is flagged when its (2·⌊R_max/2⌋+1)-square neighbourhood is
    not MV-uniform (validity included), when its displacement is not
    divisible by S_max, or when it is invalid. With reach=(before, after)
    the neighbourhood is [p − before, p + after] on both axes instead.

    Raises:
        InvalidArgumentError: If r_max or s_max is < 1
    """
    if r_max < 1 or s_max < 1:
        raise InvalidArgumentError(f"R_max and S_max must be >= 1, got {r_max}, {s_max}")
    before, after = reach if reach is not None else (r_max // 2, r_max // 2)
    flags = ~accum.valid
    flags = flags | (accum.dy % s_max != 0) | (accum.dx % s_max != 0)
    if before + after > 0:
        flags = flags | _window_not_uniform(accum, before + after + 1, before, 1, accum.shape)
    return RecomputeMask(flags)


def rfap_per_layer_check(field_in: AccumMV, field_out: AccumMV, layer: LayerSpec) -> RecomputeMask:
    """Per-layer check on the layer's output grid.

    An output is flagged when the input MVs in its receptive field are not
    uniform, or when its own MV differs from the anchor input MV divided
    by the stride (an indivisible or invalid anchor always fails).

    Raises:
        InvalidArgumentError: If the grids are inconsistent with the stride
    """
    s = layer.stride
    expected = (field_in.height // s, field_in.width // s)
    if field_in.height % s or field_in.width % s or field_out.shape != expected:
        raise InvalidArgumentError(
            f"Field grids {field_in.shape} -> {field_out.shape} do not fit stride {s}"
        )
    flags = _window_not_uniform(field_in, layer.kernel_size, layer.pad, s, expected)

    a_dy = field_in.dy[::s, ::s]
    a_dx = field_in.dx[::s, ::s]
    a_valid = field_in.valid[::s, ::s]
    coherent = (
        a_valid
        & field_out.valid
        & (a_dy % s == 0)
        & (a_dx % s == 0)
        & (a_dy // s == field_out.dy)
        & (a_dx // s == field_out.dx)
    )
    return RecomputeMask(flags | ~coherent)


def first_spatial_layer(net: NetworkSpec) -> Optional[int]:
    for layer in net.layers:
        if layer.is_spatial:
            return layer.index
    return None


def _reduce_to_grid(bits: np.ndarray, cum_stride: int) -> np.ndarray:
    if cum_stride == 1:
        return bits.copy()
    h, w = bits.shape
    return bits.reshape(h // cum_stride, cum_stride, w // cum_stride, cum_stride).any(axis=(1, 3))


def merge_rfap(s_first: RecomputeMask, rfap: RecomputeMask, net: NetworkSpec) -> InjectionPlan:
    """Map input-level flags to the input grid of every spatial layer.

    A layer-grid cell is flagged when any input pixel it covers is. The
    dispatch mask s_first is not modified: flagged pixels are correct
    after MV alignment and are only recomputed inside the network.

    Raises:
        InvalidArgumentError: If the masks do not cover the network input
    """
    grid = net.input_shape[:2]
    if s_first.shape != grid or rfap.shape != grid:
        raise InvalidArgumentError(
            f"Masks {s_first.shape}/{rfap.shape} do not match input grid {grid}"
        )
    index = first_spatial_layer(net)
    if index is None:
        return InjectionPlan.empty()
    masks: Dict[int, RecomputeMask] = {}
    for layer in net.layers:
        if layer.is_spatial:
            cs = net.cum_stride_before(layer.index)
            masks[layer.index] = RecomputeMask(_reduce_to_grid(rfap.bits, cs))
    return InjectionPlan(index, masks, rfap.count())


def per_layer_flags_at_input(accum: AccumMV, net: NetworkSpec) -> RecomputeMask:
    """Union of all per-layer flags, each placed at its anchor input pixel.

    Output i of a layer with cumulative stride s anchors at input pixel
    i·s. Used to compare the two check variants at one resolution.
    """
    flags = np.zeros(accum.shape, dtype=bool)
    for layer in net.layers:
        cs_in = net.cum_stride_before(layer.index)
        cs_out = cs_in * layer.stride
        field_in = downsample_field(accum, cs_in)
        field_out = downsample_field(accum, cs_out)
        layer_flags = rfap_per_layer_check(field_in, field_out, layer)
        flags[::cs_out, ::cs_out] |= layer_flags.bits
    return RecomputeMask(flags)
