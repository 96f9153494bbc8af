"""Tests for the reuse criterion and threshold files."""

import numpy as np
import pytest

from mvcache.core.errors import InvalidArgumentError
from mvcache.core.motion import AccumMV
from mvcache.core.network import build_network
from mvcache.core.reuse import (
    ThresholdVector,
    delta_map,
    dispatch_recompute_set,
    format_thresholds,
    parse_thresholds,
    propagate_candidates,
    read_thresholds,
    truncate_candidates,
    write_thresholds,
)
from mvcache.core.tensor import FeatureMap, RecomputeMask

CONV_NET = "seed=3\ninput=16x16x1\nconv k=3 out=1\nconv k=3 s=2 out=1\n"


@pytest.fixture
def conv_net():
    return build_network(CONV_NET)


class TestDispatchRecomputeSet:
    """Tests for the dispatch-layer set S_0."""

    def test_identical_frame_is_empty(self, rng):
        """Test an unchanged frame reuses every pixel."""
        frame = FeatureMap(rng.random((8, 8, 3), dtype=np.float32))
        s0 = dispatch_recompute_set(frame, frame.copy(), AccumMV.zeros(8, 8), 0.0)
        assert not s0.any()

    def test_changed_pixel_against_threshold(self, rng):
        """Test a change is recomputed only when it exceeds tau0."""
        cached = FeatureMap(rng.random((8, 8, 3), dtype=np.float32))
        frame = cached.copy()
        frame.data[2, 5, 1] += 0.5
        assert dispatch_recompute_set(frame, cached, AccumMV.zeros(8, 8), 0.0).count() == 1
        assert dispatch_recompute_set(frame, cached, AccumMV.zeros(8, 8), 0.6).count() == 0

    def test_aligned_pan(self, pan_sequence):
        """Test an MV-aligned pan only recomputes the revealed strip."""
        prev, cur = pan_sequence.frames[0], pan_sequence.frames[1]
        s0 = dispatch_recompute_set(cur, prev, AccumMV.uniform(64, 64, 0, 4), 0.0)
        assert s0.bits[:, :4].all()
        assert not s0.bits[:, 4:].any()

    def test_unaligned_pan_recomputes_nearly_everything(self, pan_sequence):
        """Test fixed-coordinate comparison of a pan."""
        prev, cur = pan_sequence.frames[0], pan_sequence.frames[1]
        s0 = dispatch_recompute_set(cur, prev, AccumMV.zeros(64, 64), 0.0)
        assert s0.count() > 0.9 * s0.size

    def test_dim_mismatch(self):
        """Test frame and cache must agree."""
        with pytest.raises(InvalidArgumentError):
            dispatch_recompute_set(
                FeatureMap(np.zeros((4, 4, 3))), FeatureMap(np.zeros((4, 4, 1))), AccumMV.zeros(4, 4), 0.0
            )


class TestPropagateCandidates:
    """Tests for reuse propagation."""

    def test_single_pixel_stride_one(self, conv_net):
        """Test one changed input marks its 3x3 neighbourhood."""
        s_prev = RecomputeMask.empty(16, 16)
        s_prev.bits[5, 5] = True
        out = propagate_candidates(s_prev, conv_net.layers[0])
        assert out.count() == 9
        assert out.bits[4:7, 4:7].all()

    def test_brute_force_stride_two(self, conv_net, rng):
        """Test against a direct receptive-field loop."""
        layer = conv_net.layers[1]
        s_prev = RecomputeMask(rng.random((16, 16)) < 0.05)
        out = propagate_candidates(s_prev, layer)
        expected = np.zeros((8, 8), dtype=bool)
        for i in range(8):
            for j in range(8):
                for a in range(i * 2 - 1, i * 2 + 2):
                    for b in range(j * 2 - 1, j * 2 + 2):
                        if 0 <= a < 16 and 0 <= b < 16 and s_prev.bits[a, b]:
                            expected[i, j] = True
        assert np.array_equal(out.bits, expected)

    def test_empty_input(self, conv_net):
        """Test an empty set propagates to an empty set."""
        assert not propagate_candidates(RecomputeMask.empty(16, 16), conv_net.layers[1]).any()


class TestTruncateCandidates:
    """Tests for profiling-driven truncation."""

    def test_unchanged_windows_are_dropped(self, conv_net, rng):
        """Test candidates with zero aligned change are dropped at tau 0."""
        x = FeatureMap(rng.random((16, 16, 1), dtype=np.float32))
        candidates = RecomputeMask.full(16, 16)
        kept = truncate_candidates(candidates, x, x.copy(), AccumMV.zeros(16, 16), conv_net.layers[0], 0.0)
        assert not kept.any()

    def test_changed_window_is_kept(self, conv_net, rng):
        """Test a changed window survives tau 0 but not a large tau."""
        cached = FeatureMap(rng.random((16, 16, 1), dtype=np.float32))
        current = cached.copy()
        current.data[8, 8, 0] += 0.01
        candidates = RecomputeMask.full(16, 16)
        layer = conv_net.layers[0]
        kept = truncate_candidates(candidates, current, cached, AccumMV.zeros(16, 16), layer, 0.0)
        assert kept.count() == 9
        loose = truncate_candidates(candidates, current, cached, AccumMV.zeros(16, 16), layer, 1.0)
        assert not loose.any()

    def test_invalid_mv_forces_keep(self, conv_net, rng):
        """Test windows touching an invalid MV are always kept."""
        x = FeatureMap(rng.random((16, 16, 1), dtype=np.float32))
        field = AccumMV.zeros(16, 16)
        field.valid[0, 0] = False
        kept = truncate_candidates(RecomputeMask.full(16, 16), x, x.copy(), field, conv_net.layers[0], 1.0)
        assert kept.bits[:2, :2].all()
        assert kept.count() == 4

    def test_aligned_delta_follows_motion(self, pan_sequence):
        """Test delta is zero away from the border when windows are MV-aligned."""
        net = build_network("seed=0\ninput=64x64x3\nconv k=3 out=2\n")
        prev, cur = pan_sequence.frames[0], pan_sequence.frames[1]
        delta = delta_map(cur, prev, AccumMV.uniform(64, 64, 0, 4), net.layers[0])
        # the right border compares zero padding with real cached values
        assert np.all(delta[:, 5:63] == 0)
        assert np.all(delta[:, :4] > 0)

    def test_negative_tau(self, conv_net):
        """Test tau must be non-negative."""
        x = FeatureMap(np.zeros((16, 16, 1)))
        with pytest.raises(InvalidArgumentError):
            truncate_candidates(RecomputeMask.full(16, 16), x, x, AccumMV.zeros(16, 16), conv_net.layers[0], -1.0)


class TestThresholdFiles:
    """Tests for ThresholdVector and its text format."""

    def test_format_and_parse(self, tmp_path):
        """Test provenance and values survive a file."""
        thresholds = ThresholdVector(0.01, {3: 0.003, 7: 0.0})
        path = tmp_path / "thresholds.txt"
        write_thresholds(path, thresholds, {"alpha": 0.97, "seed": 4})
        text = path.read_text()
        assert text.splitlines()[0] == "alpha=0.97"
        parsed, provenance = parse_thresholds(text)
        assert parsed == thresholds
        assert provenance == {"alpha": "0.97", "seed": "4"}
        assert read_thresholds(path) == thresholds

    def test_comments_and_blank_lines(self):
        """Test comments are ignored."""
        parsed, _ = parse_thresholds("# calibrated\n\ntau0=0.5  # dispatch\ntau[2]=1\n")
        assert parsed.tau0 == 0.5
        assert parsed.for_layer(2) == 1.0
        assert parsed.for_layer(5) == 0.0

    def test_malformed_line(self):
        """Test a line without '=' is rejected."""
        with pytest.raises(InvalidArgumentError, match="line 1"):
            parse_thresholds("tau0 0.1\n")

    def test_negative_threshold(self):
        """Test negative thresholds are rejected."""
        with pytest.raises(InvalidArgumentError):
            ThresholdVector(-0.1)

    def test_with_stage(self):
        """Test replacing the dispatch stage and one layer."""
        base = ThresholdVector.zeros([3, 7])
        assert base.is_zero()
        assert base.with_stage(None, 0.2).tau0 == 0.2
        assert base.with_stage(3, 0.1).tau == {3: 0.1, 7: 0.0}
        assert "tau[3]=0.1" in format_thresholds(base.with_stage(3, 0.1))
