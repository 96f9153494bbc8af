"""Tests for block matching and accumulated motion fields."""

import numpy as np
import pytest

from mvcache.core.errors import InvalidArgumentError
from mvcache.core.motion import (
    AccumMV,
    MVField,
    accumulate,
    downsample_field,
    estimate_mv,
    modal_mv,
    read_mv_file,
    search_order,
    warp_backward,
    write_mv_file,
)
from mvcache.core.tensor import FeatureMap
from mvcache.modules.datagen import generate_sequence


class TestEstimateMV:
    """Tests for the SAD block matcher."""

    def test_static_frames_give_zero_field(self, rng):
        """Test identical frames produce an all-zero field."""
        frame = FeatureMap(rng.random((32, 32, 3), dtype=np.float32))
        field = estimate_mv(frame, frame.copy(), 16, 4)
        assert field == MVField.zeros(2, 2, 16)

    def test_pan_recovers_displacement(self):
        """Test interior blocks of a pan recover the true shift."""
        seq = generate_sequence("pan", 2, 64, 64, seed=3, dy=0, dx=4)
        field = estimate_mv(seq.frames[1], seq.frames[0], 16, 8)
        assert np.all(field.dy[:, 1:] == 0)
        assert np.all(field.dx[:, 1:] == 4)

    def test_vertical_pan(self):
        """Test a vertical shift is found on interior rows."""
        seq = generate_sequence("pan", 2, 64, 64, seed=5, dy=-3, dx=0)
        field = estimate_mv(seq.frames[1], seq.frames[0], 16, 4)
        assert np.all(field.dy[:-1, :] == -3)
        assert np.all(field.dx[:-1, :] == 0)

    def test_dim_mismatch(self):
        """Test frames of different size are rejected."""
        a = FeatureMap(np.zeros((16, 16, 3)))
        b = FeatureMap(np.zeros((32, 16, 3)))
        with pytest.raises(InvalidArgumentError, match="differ"):
            estimate_mv(a, b)

    def test_non_multiple_dims(self):
        """Test frame dims must be multiples of the block size."""
        a = FeatureMap(np.zeros((20, 16, 3)))
        with pytest.raises(InvalidArgumentError, match="multiple"):
            estimate_mv(a, a, 16)

    def test_search_order_prefers_small_vectors(self):
        """Test the tie-break order starts at zero and grows in L1 norm."""
        order = search_order(2)
        assert order[0] == (0, 0)
        norms = [abs(dy) + abs(dx) for dy, dx in order]
        assert norms == sorted(norms)
        assert len(order) == 25


class TestMVField:
    """Tests for MVField."""

    def test_int16_limit(self):
        """Test components must fit in int16 magnitude."""
        with pytest.raises(InvalidArgumentError):
            MVField(16, np.array([[1 << 15]]), np.array([[0]]))

    def test_expand(self):
        """Test expansion to pixel resolution."""
        field = MVField(2, np.array([[1, 2]]), np.array([[3, 4]]))
        dy, dx = field.expand()
        assert dy.shape == (2, 4)
        assert dy[:, 2:].tolist() == [[2, 2], [2, 2]]
        assert dx[0].tolist() == [3, 3, 4, 4]

    def test_modal_mv(self):
        """Test the modal vector with a tie broken toward smaller norm."""
        field = MVField(16, np.array([[0, 0, 2, 2]]), np.array([[4, 4, 1, 1]]))
        assert modal_mv(field) == (2, 1)

    def test_file_round_trip(self, tmp_path):
        """Test the fixture file format."""
        field = MVField(16, np.array([[1, -2], [3, 0]]), np.array([[0, 5], [-7, 8]]))
        path = tmp_path / "field.mv"
        write_mv_file(path, field)
        assert read_mv_file(path) == field

    def test_file_bad_magic(self, tmp_path):
        """Test a corrupted magic is reported."""
        path = tmp_path / "bad.mv"
        path.write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(InvalidArgumentError, match="magic"):
            read_mv_file(path)


class TestAccumulate:
    """Tests for displacement accumulation."""

    def test_uniform_fields_add(self):
        """Test two uniform fields compose to their sum away from the border."""
        acc = AccumMV.zeros(16, 16)
        step = MVField.uniform(2, 2, 0, 2, 8)
        acc = accumulate(accumulate(acc, step), step)
        assert np.all(acc.dx[:, 4:] == 4)
        assert np.all(acc.valid[:, 4:])
        # the strip revealed one frame ago restarts from the newest step
        assert np.all(acc.dx[:, 2:4] == 2)
        assert np.all(acc.valid[:, 2:4])
        assert not acc.valid[:, :2].any()

    def test_invalid_source_restarts(self):
        """Test pixels whose source is invalid take only the new displacement."""
        acc = AccumMV.uniform(8, 8, 0, 2)
        out = accumulate(acc, AccumMV.zeros(8, 8))
        assert out.dx[0, 0] == 0
        assert out.valid[0, 0]
        assert out.dx[0, 5] == 2

    def test_shape_mismatch(self):
        """Test the block field must cover the accumulator."""
        with pytest.raises(InvalidArgumentError):
            accumulate(AccumMV.zeros(16, 16), MVField.zeros(1, 1, 8))


class TestDownsample:
    """Tests for per-layer field downsampling."""

    def test_divisible_displacements_stay_valid(self):
        """Test a displacement divisible by the stride survives."""
        acc = AccumMV.uniform(8, 8, 0, 4)
        down = downsample_field(acc, 2)
        assert down.shape == (4, 4)
        assert np.all(down.dx == 2)
        assert down.valid[:, 2:].all()

    def test_odd_displacement_is_invalid(self):
        """Test displacements not divisible by the stride are invalid."""
        acc = AccumMV.uniform(8, 8, 0, 3)
        assert not downsample_field(acc, 2).valid.any()

    def test_negative_rounds_toward_zero(self):
        """Test negative values divide toward zero."""
        acc = AccumMV(np.full((4, 4), -4), np.full((4, 4), -2), np.ones((4, 4), bool))
        down = downsample_field(acc, 2)
        assert np.all(down.dy == -2)
        assert np.all(down.dx == -1)

    def test_stride_one_copies(self):
        """Test stride 1 is an identity copy."""
        acc = AccumMV.uniform(4, 4, 1, 1)
        assert downsample_field(acc, 1) == acc


class TestWarpBackward:
    """Tests for backward warping."""

    def test_shift_and_oob(self):
        """Test out(p) = src(p - m) and the uncovered strip is reported."""
        src = FeatureMap(np.arange(16, dtype=np.float32).reshape(4, 4, 1))
        warped, oob = warp_backward(src, AccumMV.uniform(4, 4, 0, 1))
        assert warped.data[0, 1, 0] == src.data[0, 0, 0]
        assert warped.data[2, 3, 0] == src.data[2, 2, 0]
        assert oob.bits[:, 0].all()
        assert oob.count() == 4

    def test_zero_field_is_identity(self, rng):
        """Test a zero field returns an equal copy and no oob."""
        src = FeatureMap(rng.random((4, 4, 2), dtype=np.float32))
        warped, oob = warp_backward(src, AccumMV.zeros(4, 4))
        assert np.array_equal(warped.data, src.data)
        assert not oob.any()

    def test_dim_mismatch(self):
        """Test map and field grids must agree."""
        with pytest.raises(InvalidArgumentError):
            warp_backward(FeatureMap(np.zeros((4, 4, 1))), AccumMV.zeros(2, 2))
