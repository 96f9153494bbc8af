"""Reuse module - the per-position reuse criterion.

Three steps decide which positions a layer recomputes:

1. the dispatch layer compares the incoming frame with the MV-aligned
   cached input (dispatch_recompute_set);
2. reuse propagation marks every output whose receptive field touches
   the previous layer's recomputation set (propagate_candidates);
3. truncation drops candidates whose MV-aligned receptive-field change
   is bounded by τ_l / ‖w^l‖₁ (truncate_candidates).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from mvcache.core.errors import InvalidArgumentError
from mvcache.core.motion import AccumMV, warp_backward
from mvcache.core.network import LayerKind, LayerSpec, gather_windows
from mvcache.core.tensor import FeatureMap, RecomputeMask, window_reduce

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThresholdVector:
    """Calibrated tolerances.

    Attributes:
        tau0: Dispatch-layer threshold in input-value units
        tau: Threshold per profiled layer index; unlisted layers use 0
    """
    tau0: float = 0.0
    tau: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.tau0 >= 0:
            raise InvalidArgumentError(f"tau0 must be >= 0, got {self.tau0}")
        for index, value in self.tau.items():
            if not value >= 0:
                raise InvalidArgumentError(f"tau[{index}] must be >= 0, got {value}")
        object.__setattr__(self, "tau", dict(sorted(self.tau.items())))

    @classmethod
    def zeros(cls, profiled: Optional[list] = None) -> "ThresholdVector":
        return cls(0.0, {index: 0.0 for index in (profiled or [])})

    def for_layer(self, index: int) -> float:
        return float(self.tau.get(index, 0.0))

    def with_stage(self, stage: Optional[int], value: float) -> "ThresholdVector":
        """Copy with the dispatch threshold (stage None) or one layer replaced."""
        if stage is None:
            return ThresholdVector(value, dict(self.tau))
        tau = dict(self.tau)
        tau[stage] = value
        return ThresholdVector(self.tau0, tau)

    def is_zero(self) -> bool:
        return self.tau0 == 0 and all(v == 0 for v in self.tau.values())


def format_thresholds(thresholds: ThresholdVector, provenance: Optional[Mapping[str, object]] = None) -> str:
    """Render thresholds as key/value text, provenance keys first."""
    lines = []
    for key, value in (provenance or {}).items():
        lines.append(f"{key}={value}")
    lines.append(f"tau0={thresholds.tau0!r}")
    for index, value in thresholds.tau.items():
        lines.append(f"tau[{index}]={value!r}")
    return "\n".join(lines) + "\n"


def parse_thresholds(text: str) -> Tuple[ThresholdVector, Dict[str, str]]:
    """Parse key/value threshold text.

    Returns:
        (thresholds, provenance entries)

    Raises:
        InvalidArgumentError: On malformed lines or values
    """
    tau0 = 0.0
    tau: Dict[int, float] = {}
    provenance: Dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"line {line_no}: expected key=value, got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key == "tau0":
                tau0 = float(value)
            elif key.startswith("tau[") and key.endswith("]"):
                tau[int(key[4:-1])] = float(value)
            else:
                provenance[key] = value
        except ValueError:
            raise InvalidArgumentError(f"line {line_no}: bad value in '{line}'")
    return ThresholdVector(tau0, tau), provenance


def write_thresholds(
    path: Union[str, Path],
    thresholds: ThresholdVector,
    provenance: Optional[Mapping[str, object]] = None,
) -> None:
    Path(path).write_text(format_thresholds(thresholds, provenance), encoding="utf-8")


def read_thresholds(path: Union[str, Path]) -> ThresholdVector:
    return parse_thresholds(Path(path).read_text(encoding="utf-8"))[0]


def dispatch_recompute_set(
    frame: FeatureMap,
    cached_input: FeatureMap,
    accum: AccumMV,
    tau0: float,
) -> RecomputeMask:
    """Positions of the incoming frame that cannot reuse the cached input.

    A pixel is set when its MV-aligned cached value differs by more than
    tau0 in some channel, or when its accumulated MV is invalid.

    Raises:
        InvalidArgumentError: On dim mismatch
    """
    if frame.shape != cached_input.shape:
        raise InvalidArgumentError(f"Frame {frame.shape} vs cache {cached_input.shape}")
    aligned, oob = warp_backward(cached_input, accum)
    diff = np.abs(frame.data - aligned.data).max(axis=2)
    return RecomputeMask((diff > tau0) | oob.bits)


def output_grid(layer: LayerSpec, grid: Tuple[int, int]) -> Tuple[int, int]:
    return (grid[0] // layer.stride, grid[1] // layer.stride)


def propagate_candidates(s_prev: RecomputeMask, layer: LayerSpec) -> RecomputeMask:
    """Outputs whose receptive field intersects the previous recomputation set.

    Raises:
        InvalidArgumentError: If the mask grid is not divisible by the stride
    """
    s = layer.stride
    if s_prev.height % s or s_prev.width % s:
        raise InvalidArgumentError(f"Grid {s_prev.shape} not divisible by stride {s}")
    out_shape = output_grid(layer, s_prev.shape)
    if not s_prev.any():
        return RecomputeMask.empty(*out_shape)
    bits = window_reduce(s_prev.bits, layer.kernel_size, layer.pad, s, out_shape, np.any, False)
    return RecomputeMask(bits)


def window_has_invalid(field_in: AccumMV, layer: LayerSpec) -> np.ndarray:
    """Output-grid mask of windows containing an invalid MV."""
    out_shape = output_grid(layer, field_in.shape)
    if field_in.valid.all():
        return np.zeros(out_shape, dtype=bool)
    return window_reduce(~field_in.valid, layer.kernel_size, layer.pad, layer.stride, out_shape, np.any, False)


def aligned_delta(
    assembled_in: FeatureMap,
    cached_in: FeatureMap,
    field_in: AccumMV,
    layer: LayerSpec,
    rows: np.ndarray,
    cols: np.ndarray,
) -> np.ndarray:
    """Δmax per output position: current window vs MV-aligned cached window.

    The cached window is displaced by the input-grid MV at the output's
    anchor (i·s, j·s). Both sides are padded the way the layer pads
    (zeros, or excluded elements for pooling).
    """
    s, pad, k = layer.stride, layer.pad, layer.kernel_size
    anchor_r, anchor_c = rows * s, cols * s
    mdy = field_in.dy[anchor_r, anchor_c]
    mdx = field_in.dx[anchor_r, anchor_c]
    fill = -np.inf if layer.kind == LayerKind.POOL else 0.0
    current = gather_windows(assembled_in.data, anchor_r - pad, anchor_c - pad, k, fill)
    cached = gather_windows(cached_in.data, anchor_r - mdy - pad, anchor_c - mdx - pad, k, fill)
    with np.errstate(invalid="ignore"):
        diff = np.abs(current - cached)
    # both sides excluded
    diff = np.where(np.isnan(diff), np.float32(0.0), diff)
    return diff.max(axis=(1, 2, 3))


def truncate_candidates(
    candidates: RecomputeMask,
    assembled_in: FeatureMap,
    cached_in: FeatureMap,
    field_in: AccumMV,
    layer: LayerSpec,
    tau: float,
) -> RecomputeMask:
    """Keep candidates whose aligned input change exceeds tau / ‖w‖₁.

    Args:
        candidates: Output-grid candidate mask
        assembled_in: Current assembled layer input
        cached_in: Cached layer input (pre-remap)
        field_in: Accumulated MV field at the input grid
        layer: The layer
        tau: Threshold τ_l ≥ 0

    Returns:
        Subset of candidates to recompute

    Raises:
        InvalidArgumentError: On grid mismatch or negative tau
    """
    if tau < 0:
        raise InvalidArgumentError(f"tau must be >= 0, got {tau}")
    grid = (assembled_in.height, assembled_in.width)
    if grid != field_in.shape or assembled_in.shape != cached_in.shape:
        raise InvalidArgumentError(
            f"Input grid mismatch: {assembled_in.shape}, {cached_in.shape}, field {field_in.shape}"
        )
    if candidates.shape != output_grid(layer, grid):
        raise InvalidArgumentError(
            f"Candidates {candidates.shape} do not match output grid {output_grid(layer, grid)}"
        )
    if not candidates.any():
        return RecomputeMask(candidates.bits.copy())

    rows, cols = candidates.positions()
    forced = window_has_invalid(field_in, layer)[rows, cols]
    delta = aligned_delta(assembled_in, cached_in, field_in, layer, rows, cols)

    l1 = layer.l1_norm
    if tau == 0:
        keep = delta > 0
    elif l1 > 0:
        keep = delta > tau / l1
    else:
        keep = np.zeros_like(forced)
    keep |= forced

    bits = np.zeros_like(candidates.bits)
    bits[rows[keep], cols[keep]] = True
    return RecomputeMask(bits)


def delta_map(
    assembled_in: FeatureMap,
    cached_in: FeatureMap,
    field_in: AccumMV,
    layer: LayerSpec,
) -> np.ndarray:
    """Δmax at every output position (debug evaluation for oracle tests)."""
    out_shape = output_grid(layer, (assembled_in.height, assembled_in.width))
    rows, cols = np.divmod(np.arange(out_shape[0] * out_shape[1]), out_shape[1])
    return aligned_delta(assembled_in, cached_in, field_in, layer, rows, cols).reshape(out_shape)
