"""Wire module - bit-exact offload messages.

All integers are little-endian. Message layouts:

    offload  "FSOF" | version u16 | frame_id u64 | H u32 | W u32 | B u16 |
             mv_len u32 | mask_len u32 | pix_len u32 |
             mv (int16 dy,dx per block) | packed mask | pixels | crc32 u32
    hello    "FSHI" | client_id u64 | net_hash u64
    ack      "FSHA" | status u8 | last_frame_id u64
    result   "FSRS" | version u16 | frame_id u64 | status u8 |
             H u32 | W u32 | C u32 | stats_len u32 | data_len u32 |
             stats JSON | f32 data | crc32 u32

The CRC covers every byte before it. Pixels are f32 triples, or u8
triples when the sender quantises; the receiver tells them apart by
the section length.
"""

import asyncio
import json
import logging
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Dict, Optional, Tuple

import numpy as np

from mvcache.core.errors import (
    InvalidArgumentError,
    ProtocolError,
    TransportError,
    UnsupportedVersionError,
)
from mvcache.core.motion import AccumMV
from mvcache.core.settings import PixelFormat
from mvcache.core.tensor import FeatureMap, RecomputeMask

logger = logging.getLogger(__name__)

WIRE_VERSION = 1
OFFLOAD_MAGIC = b"FSOF"
HELLO_MAGIC = b"FSHI"
ACK_MAGIC = b"FSHA"
RESULT_MAGIC = b"FSRS"
PIXEL_CHANNELS = 3
MV_SENTINEL = -32768
NO_FRAME = (1 << 64) - 1

_OFFLOAD_HEADER = struct.Struct("<4sHQIIHIII")
_HELLO = struct.Struct("<4sQQ")
_ACK = struct.Struct("<4sBQ")
_RESULT_HEADER = struct.Struct("<4sHQBIIIII")
_CRC = struct.Struct("<I")


class AckStatus(IntEnum):
    ACCEPTED = 0
    NET_MISMATCH = 1


class ResultStatus(IntEnum):
    OK = 0
    ERROR = 1


@dataclass(eq=False)
class OffloadPayload:
    """One offloaded frame.

    Attributes:
        frame_id: Frame index
        height: Frame height H
        width: Frame width W
        block_size: MV block edge B
        mv_dy: Per-block accumulated dy, int16 (H/B, W/B); MV_SENTINEL marks an invalid block
        mv_dx: Per-block accumulated dx, int16 (H/B, W/B)
        packed_mask: Bit-packed 2×2 OR-downsampled recomputation mask
        pixels: (n, 3) float32 or uint8 values of the upsampled mask, raster order
    """
    frame_id: int
    height: int
    width: int
    block_size: int
    mv_dy: np.ndarray
    mv_dx: np.ndarray
    packed_mask: bytes
    pixels: np.ndarray

    @property
    def pixel_format(self) -> PixelFormat:
        return PixelFormat.UINT8 if self.pixels.dtype == np.uint8 else PixelFormat.FLOAT32

    @property
    def mv_bytes(self) -> int:
        return int(self.mv_dy.size) * 4

    @property
    def mask_bytes(self) -> int:
        return len(self.packed_mask)

    @property
    def pixel_bytes(self) -> int:
        return int(self.pixels.size) * self.pixels.dtype.itemsize

    @property
    def pixel_values(self) -> int:
        return int(self.pixels.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OffloadPayload):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and self.height == other.height
            and self.width == other.width
            and self.block_size == other.block_size
            and np.array_equal(self.mv_dy, other.mv_dy)
            and np.array_equal(self.mv_dx, other.mv_dx)
            and self.packed_mask == other.packed_mask
            and self.pixels.dtype == other.pixels.dtype
            and np.array_equal(self.pixels, other.pixels)
        )


def _cell_grid(height: int, width: int) -> Tuple[int, int]:
    if height % 2 or width % 2:
        raise InvalidArgumentError(f"Mask dims must be even, got {height}x{width}")
    return height // 2, width // 2


def packed_mask_length(height: int, width: int) -> int:
    ch, cw = _cell_grid(height, width)
    return (ch * cw + 7) // 8


def pack_mask(mask: RecomputeMask) -> bytes:
    """OR-downsample by 2×2 and pack bits MSB-first, row-major.

    Raises:
        InvalidArgumentError: If a dim is odd
    """
    ch, cw = _cell_grid(mask.height, mask.width)
    cells = mask.bits.reshape(ch, 2, cw, 2).any(axis=(1, 3))
    return np.packbits(cells.ravel(), bitorder="big").tobytes()


def unpack_mask(data: bytes, height: int, width: int) -> RecomputeMask:
    """Expand packed cells back to a full-resolution mask.

    Raises:
        ProtocolError: If the byte length does not match the dims
    """
    ch, cw = _cell_grid(height, width)
    expected = (ch * cw + 7) // 8
    if len(data) != expected:
        raise ProtocolError(f"Packed mask has {len(data)} bytes, expected {expected} for {height}x{width}")
    if ch * cw == 0:
        return RecomputeMask.empty(height, width)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=ch * cw, bitorder="big")
    cells = bits.astype(bool).reshape(ch, cw)
    return RecomputeMask(np.repeat(np.repeat(cells, 2, axis=0), 2, axis=1))


def quantize_accum(accum: AccumMV, block_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Block-granular view of an accumulated field.

    A block carries value v when every valid pixel holds v and each
    pixel's validity equals in-boundsness of p − v; otherwise it carries
    the sentinel.

    Raises:
        InvalidArgumentError: If dims are not multiples of block_size
    """
    h, w = accum.shape
    b = block_size
    if b < 1 or h % b or w % b:
        raise InvalidArgumentError(f"Field {h}x{w} is not a multiple of block size {b}")
    gh, gw = h // b, w // b

    def blocks(a: np.ndarray) -> np.ndarray:
        return a.reshape(gh, b, gw, b).transpose(0, 2, 1, 3).reshape(gh, gw, b * b)

    dy, dx, valid = blocks(accum.dy), blocks(accum.dx), blocks(accum.valid)
    first = np.argmax(valid, axis=2)
    rows, cols = np.indices((gh, gw))
    vdy = dy[rows, cols, first]
    vdx = dx[rows, cols, first]

    same = np.where(valid, (dy == vdy[..., None]) & (dx == vdx[..., None]), True).all(axis=2)
    ii, jj = np.indices((h, w))
    vdy_px = np.repeat(np.repeat(vdy, b, axis=0), b, axis=1)
    vdx_px = np.repeat(np.repeat(vdx, b, axis=0), b, axis=1)
    si, sj = ii - vdy_px, jj - vdx_px
    inside = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
    consistent = (blocks(inside) == valid).all(axis=2)
    fits = (np.abs(vdy) < (1 << 15)) & (np.abs(vdx) < (1 << 15))
    ok = same & consistent & valid.any(axis=2) & fits

    out_dy = np.where(ok, vdy, MV_SENTINEL).astype(np.int16)
    out_dx = np.where(ok, vdx, MV_SENTINEL).astype(np.int16)
    return out_dy, out_dx


def expand_quantized(mv_dy: np.ndarray, mv_dx: np.ndarray, block_size: int) -> AccumMV:
    """Pixel field of a transmitted block field; sentinel blocks are invalid."""
    b = block_size
    sentinel = (mv_dy == MV_SENTINEL) & (mv_dx == MV_SENTINEL)
    dy = np.where(sentinel, 0, mv_dy).astype(np.int32)
    dx = np.where(sentinel, 0, mv_dx).astype(np.int32)
    dy = np.repeat(np.repeat(dy, b, axis=0), b, axis=1)
    dx = np.repeat(np.repeat(dx, b, axis=0), b, axis=1)
    bad = np.repeat(np.repeat(sentinel, b, axis=0), b, axis=1)
    field = AccumMV(dy, dx, np.ones(dy.shape, bool))
    field.valid = field.source_in_bounds() & ~bad
    return field


def build_payload(
    frame_id: int,
    frame: FeatureMap,
    s0: RecomputeMask,
    accum: AccumMV,
    block_size: int = 16,
    pixel_format: PixelFormat = PixelFormat.FLOAT32,
) -> OffloadPayload:
    """Assemble the payload for a cloud frame.

    Pixels are taken for the upsampled mask, so the server needs nothing
    beyond the payload.

    Raises:
        InvalidArgumentError: If the frame is not 3-channel or dims are bad
    """
    h, w, c = frame.shape
    if c != PIXEL_CHANNELS:
        raise InvalidArgumentError(f"Offload frames carry {PIXEL_CHANNELS} channels, got {c}")
    if s0.shape != (h, w) or accum.shape != (h, w):
        raise InvalidArgumentError(f"Mask {s0.shape} / field {accum.shape} do not match frame {h}x{w}")
    packed = pack_mask(s0)
    sent = unpack_mask(packed, h, w)
    pixels = frame.data[sent.bits]
    if pixel_format == PixelFormat.UINT8:
        pixels = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    else:
        pixels = pixels.astype(np.float32)
    mv_dy, mv_dx = quantize_accum(accum, block_size)
    return OffloadPayload(frame_id, h, w, block_size, mv_dy, mv_dx, packed, pixels)


def reconstruct_input(payload: OffloadPayload) -> Tuple[FeatureMap, RecomputeMask]:
    """Sparse input of a payload: pixels at the sent mask, zeros elsewhere."""
    mask = unpack_mask(payload.packed_mask, payload.height, payload.width)
    data = np.zeros((payload.height, payload.width, PIXEL_CHANNELS), dtype=np.float32)
    values = payload.pixels
    if values.dtype == np.uint8:
        values = values.astype(np.float32) / np.float32(255.0)
    data[mask.bits] = values
    return FeatureMap(data), mask


def encoded_size(payload: OffloadPayload) -> int:
    """Exact length of encode_offload(payload)."""
    return _OFFLOAD_HEADER.size + payload.mv_bytes + payload.mask_bytes + payload.pixel_bytes + _CRC.size


def metadata_fraction(height: int, width: int, block_size: int = 16) -> Tuple[int, int]:
    """(metadata bytes, H·W·3) of a frame: MV section plus packed mask."""
    mv = (height // block_size) * (width // block_size) * 4
    return mv + packed_mask_length(height, width), height * width * PIXEL_CHANNELS


def _validate(payload: OffloadPayload) -> None:
    h, w, b = payload.height, payload.width, payload.block_size
    if b < 1 or h % b or w % b:
        raise InvalidArgumentError(f"Frame {h}x{w} is not a multiple of block size {b}")
    grid = (h // b, w // b)
    if payload.mv_dy.shape != grid or payload.mv_dx.shape != grid:
        raise InvalidArgumentError(f"MV grid {payload.mv_dy.shape} does not match {grid}")
    if len(payload.packed_mask) != packed_mask_length(h, w):
        raise InvalidArgumentError("Packed mask length does not match frame dims")
    count = unpack_mask(payload.packed_mask, h, w).count()
    if payload.pixels.shape != (count, PIXEL_CHANNELS):
        raise InvalidArgumentError(
            f"Pixels {payload.pixels.shape} do not match {count} masked positions"
        )
    if payload.pixels.dtype not in (np.float32, np.uint8):
        raise InvalidArgumentError(f"Unsupported pixel dtype {payload.pixels.dtype}")


def encode_offload(payload: OffloadPayload) -> bytes:
    """Frame a payload.

    Raises:
        InvalidArgumentError: If the payload violates its invariants
    """
    _validate(payload)
    mv = np.stack([payload.mv_dy, payload.mv_dx], axis=-1).astype("<i2").tobytes()
    pixels = payload.pixels.astype("<f4" if payload.pixels.dtype == np.float32 else "u1").tobytes()
    header = _OFFLOAD_HEADER.pack(
        OFFLOAD_MAGIC,
        WIRE_VERSION,
        payload.frame_id,
        payload.height,
        payload.width,
        payload.block_size,
        len(mv),
        len(payload.packed_mask),
        len(pixels),
    )
    body = header + mv + payload.packed_mask + pixels
    return body + _CRC.pack(zlib.crc32(body))


def _check_crc(data: bytes) -> None:
    (stored,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[: -_CRC.size]) != stored:
        raise ProtocolError("CRC mismatch")


def decode_offload(data: bytes) -> OffloadPayload:
    """Parse and verify an offload frame.

    Raises:
        ProtocolError: On truncation, bad magic, CRC or section lengths
        UnsupportedVersionError: On an unknown version
    """
    if len(data) < _OFFLOAD_HEADER.size + _CRC.size:
        raise ProtocolError(f"Offload frame truncated ({len(data)} bytes)")
    magic, version, frame_id, h, w, b, mv_len, mask_len, pix_len = _OFFLOAD_HEADER.unpack_from(data)
    if magic != OFFLOAD_MAGIC:
        raise ProtocolError(f"Bad offload magic {magic!r}")
    total = _OFFLOAD_HEADER.size + mv_len + mask_len + pix_len + _CRC.size
    if len(data) != total:
        raise ProtocolError(f"Offload frame has {len(data)} bytes, header announces {total}")
    _check_crc(data)
    if version != WIRE_VERSION:
        raise UnsupportedVersionError(f"Unsupported wire version {version}")
    if b < 1 or h % b or w % b or h % 2 or w % 2:
        raise ProtocolError(f"Bad frame geometry {h}x{w} / block {b}")

    gh, gw = h // b, w // b
    if mv_len != gh * gw * 4:
        raise ProtocolError(f"MV section has {mv_len} bytes, expected {gh * gw * 4}")
    offset = _OFFLOAD_HEADER.size
    pairs = np.frombuffer(data, dtype="<i2", count=gh * gw * 2, offset=offset).reshape(gh, gw, 2)
    offset += mv_len
    packed = bytes(data[offset : offset + mask_len])
    offset += mask_len
    count = unpack_mask(packed, h, w).count()

    values = count * PIXEL_CHANNELS
    if pix_len == values * 4:
        pixels = np.frombuffer(data, dtype="<f4", count=values, offset=offset).astype(np.float32)
    elif pix_len == values:
        pixels = np.frombuffer(data, dtype=np.uint8, count=values, offset=offset).copy()
    else:
        raise ProtocolError(f"Pixel section has {pix_len} bytes for {count} positions")

    return OffloadPayload(
        frame_id=frame_id,
        height=h,
        width=w,
        block_size=b,
        mv_dy=pairs[..., 0].astype(np.int16),
        mv_dx=pairs[..., 1].astype(np.int16),
        packed_mask=packed,
        pixels=pixels.reshape(count, PIXEL_CHANNELS),
    )


def encode_hello(client_id: int, net_hash: int) -> bytes:
    return _HELLO.pack(HELLO_MAGIC, client_id, net_hash)


def decode_hello(data: bytes) -> Tuple[int, int]:
    """Returns (client_id, net_hash)."""
    if len(data) != _HELLO.size:
        raise ProtocolError(f"Hello has {len(data)} bytes, expected {_HELLO.size}")
    magic, client_id, net_hash = _HELLO.unpack(data)
    if magic != HELLO_MAGIC:
        raise ProtocolError(f"Bad hello magic {magic!r}")
    return client_id, net_hash


def encode_ack(status: AckStatus, last_frame_id: Optional[int]) -> bytes:
    last = NO_FRAME if last_frame_id is None or last_frame_id < 0 else last_frame_id
    return _ACK.pack(ACK_MAGIC, int(status), last)


def decode_ack(data: bytes) -> Tuple[AckStatus, Optional[int]]:
    """Returns (status, last processed frame id or None)."""
    if len(data) != _ACK.size:
        raise ProtocolError(f"Ack has {len(data)} bytes, expected {_ACK.size}")
    magic, status, last = _ACK.unpack(data)
    if magic != ACK_MAGIC:
        raise ProtocolError(f"Bad ack magic {magic!r}")
    try:
        parsed = AckStatus(status)
    except ValueError:
        raise ProtocolError(f"Unknown ack status {status}")
    return parsed, None if last == NO_FRAME else last


@dataclass(eq=False)
class OffloadResult:
    """Server reply for one frame.

    Attributes:
        frame_id: Frame index
        status: OK or ERROR
        output: Final layer output (None on error)
        stats: FrameStats as a dict, or {"error": ..., "kind": ...}
    """
    frame_id: int
    status: ResultStatus
    output: Optional[FeatureMap]
    stats: Dict[str, Any]


def encode_result(result: OffloadResult) -> bytes:
    stats = json.dumps(result.stats, sort_keys=True).encode("utf-8")
    if result.output is not None:
        h, w, c = result.output.shape
        data = result.output.data.astype("<f4").tobytes()
    else:
        h = w = c = 0
        data = b""
    header = _RESULT_HEADER.pack(
        RESULT_MAGIC, WIRE_VERSION, result.frame_id, int(result.status), h, w, c, len(stats), len(data)
    )
    body = header + stats + data
    return body + _CRC.pack(zlib.crc32(body))


def decode_result(data: bytes) -> OffloadResult:
    """Parse and verify a result message.

    Raises:
        ProtocolError: On truncation, bad magic, CRC or lengths
        UnsupportedVersionError: On an unknown version
    """
    if len(data) < _RESULT_HEADER.size + _CRC.size:
        raise ProtocolError(f"Result truncated ({len(data)} bytes)")
    magic, version, frame_id, status, h, w, c, stats_len, data_len = _RESULT_HEADER.unpack_from(data)
    if magic != RESULT_MAGIC:
        raise ProtocolError(f"Bad result magic {magic!r}")
    total = _RESULT_HEADER.size + stats_len + data_len + _CRC.size
    if len(data) != total:
        raise ProtocolError(f"Result has {len(data)} bytes, header announces {total}")
    _check_crc(data)
    if version != WIRE_VERSION:
        raise UnsupportedVersionError(f"Unsupported wire version {version}")
    if data_len != h * w * c * 4:
        raise ProtocolError(f"Result data has {data_len} bytes for {h}x{w}x{c}")
    offset = _RESULT_HEADER.size
    stats = json.loads(data[offset : offset + stats_len].decode("utf-8"))
    offset += stats_len
    output = None
    if data_len:
        values = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=offset)
        output = FeatureMap(values.astype(np.float32).reshape(h, w, c))
    try:
        parsed = ResultStatus(status)
    except ValueError:
        raise ProtocolError(f"Unknown result status {status}")
    return OffloadResult(frame_id, parsed, output, stats)


async def _read_exactly(reader: asyncio.StreamReader, n: int) -> bytes:
    try:
        return await reader.readexactly(n)
    except asyncio.IncompleteReadError as e:
        raise TransportError(f"Connection closed after {len(e.partial)} of {n} bytes")
    except (ConnectionError, OSError) as e:
        raise TransportError(f"Read failed: {e}")


async def read_hello(reader: asyncio.StreamReader) -> Tuple[int, int]:
    return decode_hello(await _read_exactly(reader, _HELLO.size))


async def read_ack(reader: asyncio.StreamReader) -> Tuple[AckStatus, Optional[int]]:
    return decode_ack(await _read_exactly(reader, _ACK.size))


async def read_offload_bytes(reader: asyncio.StreamReader) -> bytes:
    """Read one offload frame off a stream without decoding it."""
    header = await _read_exactly(reader, _OFFLOAD_HEADER.size)
    if header[:4] != OFFLOAD_MAGIC:
        raise ProtocolError(f"Bad offload magic {header[:4]!r}")
    *_, mv_len, mask_len, pix_len = _OFFLOAD_HEADER.unpack(header)
    rest = await _read_exactly(reader, mv_len + mask_len + pix_len + _CRC.size)
    return header + rest


async def read_result(reader: asyncio.StreamReader) -> OffloadResult:
    header = await _read_exactly(reader, _RESULT_HEADER.size)
    if header[:4] != RESULT_MAGIC:
        raise ProtocolError(f"Bad result magic {header[:4]!r}")
    *_, stats_len, data_len = _RESULT_HEADER.unpack(header)
    rest = await _read_exactly(reader, stats_len + data_len + _CRC.size)
    return decode_result(header + rest)
