"""Tests for the offload wire format."""

import asyncio
import struct
import zlib
from fractions import Fraction

import numpy as np
import pytest

from mvcache.adapters.wire import (
    MV_SENTINEL,
    AckStatus,
    OffloadPayload,
    OffloadResult,
    ResultStatus,
    build_payload,
    decode_ack,
    decode_hello,
    decode_offload,
    decode_result,
    encode_ack,
    encode_hello,
    encode_offload,
    encode_result,
    encoded_size,
    expand_quantized,
    metadata_fraction,
    pack_mask,
    packed_mask_length,
    quantize_accum,
    read_offload_bytes,
    read_result,
    reconstruct_input,
    unpack_mask,
)
from mvcache.core.errors import InvalidArgumentError, ProtocolError, TransportError, UnsupportedVersionError
from mvcache.core.motion import AccumMV
from mvcache.core.settings import PixelFormat
from mvcache.core.tensor import FeatureMap, RecomputeMask


def _random_payload(rng, size=32, pixel_format=PixelFormat.FLOAT32):
    frame = FeatureMap(rng.random((size, size, 3), dtype=np.float32))
    s0 = RecomputeMask(rng.random((size, size)) < rng.random())
    accum = AccumMV.uniform(size, size, int(rng.integers(-6, 7)), int(rng.integers(-6, 7)))
    return build_payload(int(rng.integers(0, 1 << 40)), frame, s0, accum, 16, pixel_format)


def _recrc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


class TestMaskPacking:
    """Tests for the 2x2 packed mask."""

    def test_or_downsample(self):
        """Test any set pixel sets its whole cell."""
        mask = RecomputeMask.empty(4, 4)
        mask.bits[1, 2] = True
        packed = pack_mask(mask)
        assert packed == bytes([0b01000000])
        restored = unpack_mask(packed, 4, 4)
        assert restored.bits[:2, 2:].all()
        assert restored.count() == 4

    def test_length(self):
        """Test the packed length rounds up to whole bytes."""
        assert packed_mask_length(128, 128) == 128 * 128 // 32
        assert packed_mask_length(6, 6) == 2
        assert len(pack_mask(RecomputeMask.full(6, 6))) == 2

    def test_odd_dims_rejected(self):
        """Test odd mask dims cannot be packed."""
        with pytest.raises(InvalidArgumentError, match="even"):
            pack_mask(RecomputeMask.empty(3, 4))

    def test_wrong_length_rejected(self):
        """Test a packed mask of the wrong length is a protocol error."""
        with pytest.raises(ProtocolError):
            unpack_mask(b"\x00", 8, 8)


class TestQuantizedField:
    """Tests for block-granular accumulated fields."""

    def test_uniform_field_round_trips(self):
        """Test a bounds-consistent uniform field survives quantization."""
        accum = AccumMV.uniform(32, 32, 0, 4)
        dy, dx = quantize_accum(accum, 16)
        assert dx.tolist() == [[4, 4], [4, 4]]
        assert expand_quantized(dy, dx, 16) == accum

    def test_mixed_block_is_sentinel(self):
        """Test a block holding two displacements is sent as the sentinel."""
        accum = AccumMV.zeros(32, 32)
        accum.dx[3, 20] = 2
        dy, dx = quantize_accum(accum, 16)
        assert dx[0, 1] == MV_SENTINEL
        assert dx[1, 1] == 0
        expanded = expand_quantized(dy, dx, 16)
        assert not expanded.valid[:16, 16:].any()
        assert expanded.valid[16:, :].all()

    def test_fully_invalid_block_is_sentinel(self):
        """Test a block with no valid pixel carries no displacement."""
        dy, dx = quantize_accum(AccumMV.uniform(32, 32, 0, 40), 16)
        assert (dx == MV_SENTINEL).all()

    def test_bad_block_size(self):
        """Test dims must be block multiples."""
        with pytest.raises(InvalidArgumentError):
            quantize_accum(AccumMV.zeros(24, 24), 16)


class TestPayload:
    """Tests for payload assembly and reconstruction."""

    def test_build_and_reconstruct(self, rng):
        """Test the server-side input holds the frame at the sent mask."""
        frame = FeatureMap(rng.random((32, 32, 3), dtype=np.float32))
        s0 = RecomputeMask.empty(32, 32)
        s0.bits[5, 7] = True
        payload = build_payload(3, frame, s0, AccumMV.zeros(32, 32))

        sparse, sent = reconstruct_input(payload)
        assert sent.count() == 4
        assert sent.bits[5, 7]
        assert np.array_equal(sparse.data[sent.bits], frame.data[sent.bits])
        assert not sparse.data[~sent.bits].any()

    def test_uint8_pixels(self, rng):
        """Test quantised pixels are within half a step of the frame."""
        frame = FeatureMap(rng.random((16, 16, 3), dtype=np.float32))
        payload = build_payload(0, frame, RecomputeMask.full(16, 16), AccumMV.zeros(16, 16), 16, PixelFormat.UINT8)
        assert payload.pixel_format == PixelFormat.UINT8
        assert payload.pixel_bytes == 16 * 16 * 3
        sparse, _ = reconstruct_input(payload)
        assert np.abs(sparse.data - frame.data).max() <= 0.5 / 255 + 1e-6

    def test_channel_count_checked(self):
        """Test only 3-channel frames are offloaded."""
        with pytest.raises(InvalidArgumentError):
            build_payload(0, FeatureMap(np.zeros((16, 16, 1))), RecomputeMask.full(16, 16), AccumMV.zeros(16, 16))

    @pytest.mark.parametrize("size", [128, 512, 1024])
    def test_metadata_fraction(self, size):
        """Test MV and mask sections cost 1/192 + 1/96 of a raw frame."""
        meta, raw = metadata_fraction(size, size)
        assert Fraction(meta, raw) == Fraction(1, 192) + Fraction(1, 96)


class TestOffloadCodec:
    """Tests for encode_offload/decode_offload."""

    def test_random_round_trips(self):
        """Test random payloads decode to themselves at their exact size."""
        rng = np.random.default_rng(5)
        for index in range(1000):
            pixel_format = PixelFormat.UINT8 if index % 4 == 0 else PixelFormat.FLOAT32
            payload = _random_payload(rng, 32, pixel_format)
            if payload.pixel_values == 0:
                continue
            data = encode_offload(payload)
            assert len(data) == encoded_size(payload)
            assert decode_offload(data) == payload

    def test_corruption_fails_crc(self, rng):
        """Test a flipped bit anywhere after the header is caught."""
        data = bytearray(encode_offload(_random_payload(rng)))
        data[-10] ^= 0x01
        with pytest.raises(ProtocolError, match="CRC"):
            decode_offload(bytes(data))

    def test_truncation(self, rng):
        """Test short and inconsistent frames are rejected."""
        data = encode_offload(_random_payload(rng))
        with pytest.raises(ProtocolError, match="truncated"):
            decode_offload(data[:10])
        with pytest.raises(ProtocolError, match="announces"):
            decode_offload(data[:-1])

    def test_bad_magic(self, rng):
        """Test a foreign magic is rejected."""
        data = encode_offload(_random_payload(rng))
        with pytest.raises(ProtocolError, match="magic"):
            decode_offload(b"XXXX" + data[4:])

    def test_unknown_version(self, rng):
        """Test a valid frame of another version is reported as such."""
        body = encode_offload(_random_payload(rng))[:-4]
        body = body[:4] + struct.pack("<H", 9) + body[6:]
        with pytest.raises(UnsupportedVersionError):
            decode_offload(_recrc(body))

    def test_invalid_payload_not_encoded(self, rng):
        """Test a payload whose pixels do not match its mask is refused."""
        frame = FeatureMap(rng.random((32, 32, 3), dtype=np.float32))
        payload = build_payload(0, frame, RecomputeMask.full(32, 32), AccumMV.zeros(32, 32))
        broken = OffloadPayload(
            payload.frame_id, payload.height, payload.width, payload.block_size,
            payload.mv_dy, payload.mv_dx, payload.packed_mask, payload.pixels[:-1],
        )
        with pytest.raises(InvalidArgumentError):
            encode_offload(broken)


class TestHandshakeAndResult:
    """Tests for hello, ack and result messages."""

    def test_hello(self):
        """Test hello carries client id and network hash."""
        assert decode_hello(encode_hello(7, 0xDEADBEEF)) == (7, 0xDEADBEEF)
        with pytest.raises(ProtocolError):
            decode_hello(b"FSHI")

    def test_ack(self):
        """Test acks with and without a processed frame."""
        assert decode_ack(encode_ack(AckStatus.ACCEPTED, 41)) == (AckStatus.ACCEPTED, 41)
        assert decode_ack(encode_ack(AckStatus.NET_MISMATCH, None)) == (AckStatus.NET_MISMATCH, None)
        assert decode_ack(encode_ack(AckStatus.ACCEPTED, -1))[1] is None

    def test_ack_unknown_status(self):
        """Test an undefined status byte is a protocol error."""
        with pytest.raises(ProtocolError, match="status"):
            decode_ack(struct.pack("<4sBQ", b"FSHA", 9, 0))

    def test_result_round_trip(self, rng):
        """Test a result keeps its output and stats."""
        output = FeatureMap(rng.random((4, 4, 16), dtype=np.float32))
        result = OffloadResult(3, ResultStatus.OK, output, {"compute_ratio": 0.25})
        decoded = decode_result(encode_result(result))
        assert decoded.frame_id == 3
        assert decoded.status == ResultStatus.OK
        assert np.array_equal(decoded.output.data, output.data)
        assert decoded.stats == {"compute_ratio": 0.25}

    def test_error_result(self):
        """Test an error result has no output."""
        result = OffloadResult(5, ResultStatus.ERROR, None, {"error": "desync", "kind": "ProtocolDesyncError"})
        decoded = decode_result(encode_result(result))
        assert decoded.output is None
        assert decoded.stats["kind"] == "ProtocolDesyncError"

    def test_result_crc(self):
        """Test a corrupted result is rejected."""
        data = bytearray(encode_result(OffloadResult(1, ResultStatus.OK, None, {})))
        data[-1] ^= 0xFF
        with pytest.raises(ProtocolError, match="CRC"):
            decode_result(bytes(data))


@pytest.mark.asyncio
class TestStreamReaders:
    """Tests for reading messages off an asyncio stream."""

    async def test_read_offload_and_result(self, rng):
        """Test framed reads return whole messages."""
        payload = _random_payload(rng)
        result = OffloadResult(2, ResultStatus.OK, None, {"ok": True})
        reader = asyncio.StreamReader()
        reader.feed_data(encode_offload(payload) + encode_result(result))
        reader.feed_eof()

        assert decode_offload(await read_offload_bytes(reader)) == payload
        assert (await read_result(reader)).stats == {"ok": True}

    async def test_closed_stream(self, rng):
        """Test a connection closed mid-message is a transport error."""
        reader = asyncio.StreamReader()
        reader.feed_data(encode_offload(_random_payload(rng))[:30])
        reader.feed_eof()
        with pytest.raises(TransportError, match="closed"):
            await read_offload_bytes(reader)
