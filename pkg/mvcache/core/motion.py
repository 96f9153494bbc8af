"""Motion module - block motion vectors and accumulated displacement fields.

Stands in for codec MV extraction with an exhaustive SAD block matcher,
and implements the field algebra the cache needs: composition across
frames, per-layer downsampling and backward warping.

Convention: a motion vector points from a current position to its
reference position, reference = current − mv.
"""

import logging
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from mvcache.core.errors import InvalidArgumentError
from mvcache.core.tensor import FeatureMap, RecomputeMask

logger = logging.getLogger(__name__)

MV_FILE_MAGIC = b"FSMV"
MV_FILE_VERSION = 1
_MV_HEADER = struct.Struct("<4sHHII")
INT16_LIMIT = 1 << 15


@dataclass(eq=False)
class MVField:
    """Block-granular motion field.

    Attributes:
        block_size: Block edge B in pixels
        dy: Vertical component per block, int16 array (grid_h, grid_w)
        dx: Horizontal component per block, int16 array (grid_h, grid_w)
    """
    block_size: int
    dy: np.ndarray
    dx: np.ndarray

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise InvalidArgumentError(f"Block size must be >= 1, got {self.block_size}")
        dy = np.asarray(self.dy)
        dx = np.asarray(self.dx)
        if dy.shape != dx.shape or dy.ndim != 2:
            raise InvalidArgumentError(
                f"MV components need equal 2-d shapes, got {dy.shape} and {dx.shape}"
            )
        if np.abs(dy.astype(np.int64)).max(initial=0) >= INT16_LIMIT or \
                np.abs(dx.astype(np.int64)).max(initial=0) >= INT16_LIMIT:
            raise InvalidArgumentError("MV components must satisfy |v| < 2^15")
        self.dy = dy.astype(np.int16)
        self.dx = dx.astype(np.int16)

    @classmethod
    def zeros(cls, grid_h: int, grid_w: int, block_size: int = 16) -> "MVField":
        shape = (grid_h, grid_w)
        return cls(block_size, np.zeros(shape, np.int16), np.zeros(shape, np.int16))

    @classmethod
    def uniform(cls, grid_h: int, grid_w: int, dy: int, dx: int, block_size: int = 16) -> "MVField":
        shape = (grid_h, grid_w)
        return cls(block_size, np.full(shape, dy, np.int16), np.full(shape, dx, np.int16))

    @property
    def grid_h(self) -> int:
        return int(self.dy.shape[0])

    @property
    def grid_w(self) -> int:
        return int(self.dy.shape[1])

    @property
    def frame_shape(self) -> Tuple[int, int]:
        return (self.grid_h * self.block_size, self.grid_w * self.block_size)

    def expand(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-pixel (dy, dx) int32 arrays at frame resolution."""
        b = self.block_size
        dy = np.repeat(np.repeat(self.dy.astype(np.int32), b, axis=0), b, axis=1)
        dx = np.repeat(np.repeat(self.dx.astype(np.int32), b, axis=0), b, axis=1)
        return dy, dx

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MVField):
            return NotImplemented
        return (
            self.block_size == other.block_size
            and np.array_equal(self.dy, other.dy)
            and np.array_equal(self.dx, other.dx)
        )


@dataclass(eq=False)
class AccumMV:
    """Pixel-granular accumulated displacement field m̂.

    Attributes:
        dy: Vertical displacement per pixel, int32 (height, width)
        dx: Horizontal displacement per pixel, int32 (height, width)
        valid: False where the backward source left the frame
    """
    dy: np.ndarray
    dx: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.dy = np.asarray(self.dy, dtype=np.int32)
        self.dx = np.asarray(self.dx, dtype=np.int32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.dy.shape == self.dx.shape == self.valid.shape) or self.dy.ndim != 2:
            raise InvalidArgumentError(
                f"AccumMV arrays need equal 2-d shapes, got "
                f"{self.dy.shape}, {self.dx.shape}, {self.valid.shape}"
            )

    @classmethod
    def zeros(cls, height: int, width: int) -> "AccumMV":
        shape = (height, width)
        return cls(np.zeros(shape, np.int32), np.zeros(shape, np.int32), np.ones(shape, bool))

    @classmethod
    def uniform(cls, height: int, width: int, dy: int, dx: int) -> "AccumMV":
        """Uniform field with validity set from bounds."""
        field = cls(
            np.full((height, width), dy, np.int32),
            np.full((height, width), dx, np.int32),
            np.ones((height, width), bool),
        )
        field.valid = field.source_in_bounds()
        return field

    @property
    def height(self) -> int:
        return int(self.dy.shape[0])

    @property
    def width(self) -> int:
        return int(self.dy.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def source_in_bounds(self) -> np.ndarray:
        """Mask of pixels whose backward source (i,j) − m lies inside the grid."""
        ii, jj = np.indices(self.shape)
        si = ii - self.dy
        sj = jj - self.dx
        return (si >= 0) & (si < self.height) & (sj >= 0) & (sj < self.width)

    def is_zero(self) -> bool:
        return bool(not self.dy.any() and not self.dx.any() and self.valid.all())

    def copy(self) -> "AccumMV":
        return AccumMV(self.dy.copy(), self.dx.copy(), self.valid.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AccumMV):
            return NotImplemented
        return (
            np.array_equal(self.dy, other.dy)
            and np.array_equal(self.dx, other.dx)
            and np.array_equal(self.valid, other.valid)
        )


def search_order(radius: int) -> List[Tuple[int, int]]:
    """Candidate displacements in tie-break order.

    Sorted by |dy|+|dx|, then dy, then dx, so the first minimum found
    while scanning is the one the tie-break rule selects.
    """
    cands = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(cands, key=lambda m: (abs(m[0]) + abs(m[1]), m[0], m[1]))


def estimate_mv(
    cur: FeatureMap,
    ref: FeatureMap,
    block_size: int = 16,
    search_radius: int = 8,
) -> MVField:
    """Exhaustive SAD block matching.

    The reference is edge-replicated outside the frame, so candidate
    blocks may reach past the border the way unrestricted codec MVs do.

    Args:
        cur: Current frame
        ref: Reference (previous) frame
        block_size: Block edge B; frame dims must be multiples of it
        search_radius: Search window half-size R_s

    Returns:
        MVField with, per block, the SAD-minimising displacement

    Raises:
        InvalidArgumentError: On dim mismatch or non-multiple dims
    """
    if cur.shape != ref.shape:
        raise InvalidArgumentError(f"Frame dims differ: {cur.shape} vs {ref.shape}")
    h, w, _ = cur.shape
    b = block_size
    if b < 1 or h % b or w % b:
        raise InvalidArgumentError(f"Frame {h}x{w} is not a multiple of block size {b}")
    if search_radius < 0:
        raise InvalidArgumentError(f"Search radius must be >= 0, got {search_radius}")

    gh, gw = h // b, w // b
    r = search_radius
    padded = np.pad(ref.data, ((r, r), (r, r), (0, 0)), mode="edge")
    best_sad = np.full((gh, gw), np.inf)
    best_dy = np.zeros((gh, gw), np.int16)
    best_dx = np.zeros((gh, gw), np.int16)

    for dy, dx in search_order(r):
        shifted = padded[r - dy : r - dy + h, r - dx : r - dx + w]
        diff = np.abs(cur.data - shifted).sum(axis=2, dtype=np.float64)
        sad = diff.reshape(gh, b, gw, b).sum(axis=(1, 3))
        better = sad < best_sad
        if better.any():
            best_sad[better] = sad[better]
            best_dy[better] = dy
            best_dx[better] = dx

    return MVField(b, best_dy, best_dx)


def modal_mv(field: MVField) -> Tuple[int, int]:
    """Most frequent block displacement; ties go to the tie-break order."""
    counts = Counter(zip(field.dy.ravel().tolist(), field.dx.ravel().tolist()))
    top = max(counts.values())
    modes = [m for m, n in counts.items() if n == top]
    return min(modes, key=lambda m: (abs(m[0]) + abs(m[1]), m[0], m[1]))


def _compose(acc: AccumMV, ndy: np.ndarray, ndx: np.ndarray) -> AccumMV:
    h, w = acc.shape
    ii, jj = np.indices((h, w))
    si, sj = ii - ndy, jj - ndx
    src_in = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
    sic = np.clip(si, 0, h - 1)
    sjc = np.clip(sj, 0, w - 1)
    src_ok = src_in & acc.valid[sic, sjc]

    out_dy = np.where(src_ok, acc.dy[sic, sjc] + ndy, ndy)
    out_dx = np.where(src_ok, acc.dx[sic, sjc] + ndx, ndx)
    ti, tj = ii - out_dy, jj - out_dx
    valid = (ti >= 0) & (ti < h) & (tj >= 0) & (tj < w)
    return AccumMV(out_dy, out_dx, valid)


def accumulate(acc: AccumMV, new: Union[MVField, AccumMV]) -> AccumMV:
    """Warp the accumulator into the current frame and add the new field.

    out(p) = acc(p − new(p)) + new(p) where the lookup source is a valid
    in-bounds pixel, else out(p) = new(p). Validity is recomputed from
    bounds of p − out(p).

    Args:
        acc: Accumulated field in the previous frame's coordinates
        new: Per-frame block field (or an already pixel-level field)

    Returns:
        New accumulated field

    Raises:
        InvalidArgumentError: If pixel dims differ
    """
    if isinstance(new, MVField):
        if new.frame_shape != acc.shape:
            raise InvalidArgumentError(
                f"Field covers {new.frame_shape}, accumulator is {acc.shape}"
            )
        ndy, ndx = new.expand()
    else:
        if new.shape != acc.shape:
            raise InvalidArgumentError(f"Field dims {new.shape} vs accumulator {acc.shape}")
        ndy, ndx = new.dy, new.dx
    return _compose(acc, ndy, ndx)


def downsample_field(acc: AccumMV, cum_stride: int) -> AccumMV:
    """Resample the field to a layer grid with cumulative stride s.

    Values are sampled at (i·s, j·s) and divided by s rounding toward zero;
    displacements not divisible by s are marked invalid.

    Raises:
        InvalidArgumentError: If dims are not divisible by s
    """
    s = cum_stride
    if s < 1:
        raise InvalidArgumentError(f"Stride must be >= 1, got {s}")
    if s == 1:
        return acc.copy()
    if acc.height % s or acc.width % s:
        raise InvalidArgumentError(f"Field {acc.shape} not divisible by stride {s}")
    dy = acc.dy[::s, ::s]
    dx = acc.dx[::s, ::s]
    divisible = (dy % s == 0) & (dx % s == 0)
    qdy = np.sign(dy) * (np.abs(dy) // s)
    qdx = np.sign(dx) * (np.abs(dx) // s)
    return AccumMV(qdy, qdx, acc.valid[::s, ::s] & divisible)


def warp_backward(src: FeatureMap, field: AccumMV) -> Tuple[FeatureMap, RecomputeMask]:
    """Backward-warp src into the current frame: out(p) = src(p − m(p)).

    Positions whose source is invalid or out of bounds keep src(p) and are
    reported in the oob mask; the caller must recompute them.

    Returns:
        (warped map, oob mask)

    Raises:
        InvalidArgumentError: If spatial dims differ
    """
    if (src.height, src.width) != field.shape:
        raise InvalidArgumentError(
            f"Map {src.height}x{src.width} does not match field {field.shape}"
        )
    if field.is_zero():
        return src.copy(), RecomputeMask.empty(src.height, src.width)
    ii, jj = np.indices(field.shape)
    si, sj = ii - field.dy, jj - field.dx
    ok = field.valid & (si >= 0) & (si < src.height) & (sj >= 0) & (sj < src.width)
    si = np.where(ok, si, ii)
    sj = np.where(ok, sj, jj)
    return FeatureMap(src.data[si, sj]), RecomputeMask(~ok)


def reset(acc: AccumMV) -> AccumMV:
    """Zero field with every pixel valid."""
    return AccumMV.zeros(acc.height, acc.width)


def write_mv_file(path: Union[str, Path], field: MVField) -> None:
    """Write a field in the FSMV fixture format."""
    header = _MV_HEADER.pack(MV_FILE_MAGIC, MV_FILE_VERSION, field.block_size, field.grid_h, field.grid_w)
    pairs = np.stack([field.dy, field.dx], axis=-1).astype("<i2")
    Path(path).write_bytes(header + pairs.tobytes())


def read_mv_file(path: Union[str, Path]) -> MVField:
    """Read a field written by write_mv_file.

    Raises:
        InvalidArgumentError: On bad magic, version or length
    """
    raw = Path(path).read_bytes()
    if len(raw) < _MV_HEADER.size:
        raise InvalidArgumentError(f"MV file too short: {path}")
    magic, version, block, gh, gw = _MV_HEADER.unpack_from(raw)
    if magic != MV_FILE_MAGIC:
        raise InvalidArgumentError(f"Bad MV file magic {magic!r} in {path}")
    if version != MV_FILE_VERSION:
        raise InvalidArgumentError(f"Unsupported MV file version {version} in {path}")
    body = raw[_MV_HEADER.size:]
    if len(body) != gh * gw * 4:
        raise InvalidArgumentError(
            f"MV file {path} has {len(body)} payload bytes, expected {gh * gw * 4}"
        )
    pairs = np.frombuffer(body, dtype="<i2").reshape(gh, gw, 2)
    return MVField(block, pairs[..., 0].copy(), pairs[..., 1].copy())
