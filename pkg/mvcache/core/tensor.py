"""Tensor module - dense feature maps and recomputation masks.

FeatureMap and RecomputeMask are thin wrappers over numpy arrays in the
canonical channel-last layout: maps are (height, width, channels)
float32, masks are (height, width) bool. All higher modules exchange
these two types.
"""

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mvcache.core.errors import InvalidArgumentError

Position = Tuple[int, int]


@dataclass(eq=False)
class FeatureMap:
    """Dense H×W×C float32 tensor.

    Carries input frames (values 0.0-1.0) as well as layer activations.
    The wrapped array is owned by whoever holds the map; operations in
    this package never mutate a map they received as input.

    Attributes:
        data: Array of shape (height, width, channels), float32

    Example:
        >>> fm = new_feature_map(2, 2, 1, 0.0)
        >>> fm.shape
        (2, 2, 1)
    """
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise InvalidArgumentError(
                f"FeatureMap needs a 3-d array, got shape {data.shape}"
            )
        if min(data.shape) < 1:
            raise InvalidArgumentError(f"FeatureMap dims must be >= 1, got {data.shape}")
        self.data = data

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def copy(self) -> "FeatureMap":
        return FeatureMap(self.data.copy())

    def is_finite(self) -> bool:
        """Check that no value is NaN or infinite."""
        return bool(np.isfinite(self.data).all())


@dataclass(eq=False)
class RecomputeMask:
    """Boolean recomputation set S_l on one layer's spatial grid.

    Attributes:
        bits: Array of shape (height, width), bool
    """
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise InvalidArgumentError(
                f"RecomputeMask needs a 2-d array, got shape {bits.shape}"
            )
        self.bits = bits

    @classmethod
    def empty(cls, height: int, width: int) -> "RecomputeMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, height: int, width: int) -> "RecomputeMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def size(self) -> int:
        return self.height * self.width

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def any(self) -> bool:
        return bool(self.bits.any())

    def all(self) -> bool:
        return bool(self.bits.all())

    def positions(self) -> Tuple[np.ndarray, np.ndarray]:
        """Row and column indices of set positions, row-major order."""
        return np.nonzero(self.bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RecomputeMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))


@dataclass(frozen=True)
class Rect:
    """Half-open rectangle of positions [top, bottom) × [left, right).

    Used for receptive-field windows R^l(i,j).
    """
    top: int
    left: int
    bottom: int
    right: int

    def __post_init__(self) -> None:
        if self.top > self.bottom or self.left > self.right:
            raise InvalidArgumentError(f"Degenerate rect: {self}")

    @property
    def area(self) -> int:
        return (self.bottom - self.top) * (self.right - self.left)

    def clip(self, height: int, width: int) -> "Rect":
        top = min(max(self.top, 0), height)
        left = min(max(self.left, 0), width)
        return Rect(top, left, max(top, min(self.bottom, height)), max(left, min(self.right, width)))

    def contains(self, i: int, j: int) -> bool:
        return self.top <= i < self.bottom and self.left <= j < self.right


def new_feature_map(h: int, w: int, c: int, fill: float = 0.0) -> FeatureMap:
    """Create a feature map with every value equal to fill.

    Args:
        h: Height in positions
        w: Width in positions
        c: Number of channels
        fill: Finite fill value

    Returns:
        New FeatureMap

    Raises:
        InvalidArgumentError: If a dimension is < 1 or fill is not finite
    """
    if h < 1 or w < 1 or c < 1:
        raise InvalidArgumentError(f"Dimensions must be >= 1, got {h}x{w}x{c}")
    if not np.isfinite(fill):
        raise InvalidArgumentError(f"Fill value must be finite, got {fill}")
    return FeatureMap(np.full((h, w, c), fill, dtype=np.float32))


def max_abs_diff(
    a: FeatureMap,
    b: FeatureMap,
    at: Sequence[Tuple[Position, Position]],
) -> float:
    """Maximum absolute difference |a(p) − b(p̂)| over listed pairs and channels.

    Args:
        a: First map
        b: Second map (same channel count)
        at: List of (position in a, position in b) pairs

    Returns:
        Maximum absolute difference, 0.0 for an empty list

    Raises:
        InvalidArgumentError: On channel mismatch or out-of-bounds positions
    """
    if a.channels != b.channels:
        raise InvalidArgumentError(
            f"Channel mismatch: {a.channels} vs {b.channels}"
        )
    if len(at) == 0:
        return 0.0
    pairs = np.asarray(at, dtype=np.int64).reshape(-1, 2, 2)
    pa, pb = pairs[:, 0, :], pairs[:, 1, :]
    for name, pts, fm in (("a", pa, a), ("b", pb, b)):
        inside = (
            (pts[:, 0] >= 0) & (pts[:, 0] < fm.height)
            & (pts[:, 1] >= 0) & (pts[:, 1] < fm.width)
        )
        if not inside.all():
            bad = pts[~inside][0]
            raise InvalidArgumentError(
                f"Position {tuple(int(v) for v in bad)} out of bounds for map {name} {fm.shape}"
            )
    va = a.data[pa[:, 0], pa[:, 1]]
    vb = b.data[pb[:, 0], pb[:, 1]]
    return float(np.abs(va - vb).max())


def _check_same_grid(a: RecomputeMask, b: RecomputeMask) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"Grid mismatch: {a.shape} vs {b.shape}")


def mask_union(a: RecomputeMask, b: RecomputeMask) -> RecomputeMask:
    """Pointwise OR of two masks on the same grid."""
    _check_same_grid(a, b)
    return RecomputeMask(a.bits | b.bits)


def mask_union_all(masks: Iterable[RecomputeMask]) -> RecomputeMask:
    """Union of one or more masks on the same grid."""
    masks = list(masks)
    if not masks:
        raise InvalidArgumentError("mask_union_all needs at least one mask")
    out = masks[0].bits.copy()
    for m in masks[1:]:
        _check_same_grid(masks[0], m)
        out |= m.bits
    return RecomputeMask(out)


def mask_count(mask: RecomputeMask) -> int:
    """Cardinality |S|."""
    return mask.count()


def window_reduce(
    values: np.ndarray,
    kernel: int,
    pad: int,
    stride: int,
    out_shape: Tuple[int, int],
    reducer: Callable[..., np.ndarray],
    fill,
) -> np.ndarray:
    """Reduce the window [i·s − pad, i·s − pad + k)² of every output position.

    Positions outside the input are replaced by fill, so fill must be the
    reducer's neutral element (False for any, −inf for max, +inf for min).

    Args:
        values: 2-d input array
        kernel: Window size k
        pad: Leading padding
        stride: Output stride s
        out_shape: Output grid (rows, cols)
        reducer: numpy reduction accepting axis=(2, 3)
        fill: Value used outside the input

    Returns:
        Array of shape out_shape
    """
    h, w = values.shape
    ho, wo = out_shape
    bottom = max(0, (ho - 1) * stride + kernel - pad - h)
    right = max(0, (wo - 1) * stride + kernel - pad - w)
    padded = np.pad(values, ((pad, bottom), (pad, right)), constant_values=fill)
    windows = sliding_window_view(padded, (kernel, kernel))
    windows = windows[: (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return reducer(windows, axis=(2, 3))


def mask_dilate(mask: RecomputeMask, radius: int) -> RecomputeMask:
    """Set every position within Chebyshev distance radius of a set position.

    Args:
        mask: Input mask
        radius: Non-negative dilation radius (clipped at borders)

    Returns:
        Dilated mask on the same grid

    Raises:
        InvalidArgumentError: If radius is negative
    """
    if radius < 0:
        raise InvalidArgumentError(f"Dilation radius must be >= 0, got {radius}")
    if radius == 0 or not mask.any():
        return RecomputeMask(mask.bits.copy())
    bits = window_reduce(mask.bits, 2 * radius + 1, radius, 1, mask.shape, np.any, False)
    return RecomputeMask(bits)
