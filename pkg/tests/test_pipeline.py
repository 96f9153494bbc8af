"""Tests for the per-endpoint sparse pipeline.

At zero thresholds every reuse mode must reproduce the dense forward
pass; the remaining tests check the work accounting.
"""

import numpy as np
import pytest

from mvcache.core.cache_state import EndpointCache
from mvcache.core.errors import InternalError, InvalidArgumentError
from mvcache.core.motion import MVField
from mvcache.core.network import dense_forward
from mvcache.core.pipeline import (
    FrameStats,
    StreamProcessor,
    compute_ratio,
    dense_seed,
    field_for_mode,
    run_baseline,
    sparse_forward,
)
from mvcache.core.reuse import ThresholdVector
from mvcache.core.rfap import RfapMode
from mvcache.core.settings import PipelineOptions, ReuseMode
from mvcache.core.tensor import FeatureMap, RecomputeMask
from mvcache.modules.datagen import generate_sequence


def _assert_exact(net, sequence, processor, use_manifest_motion=False):
    stats = []
    for frame, mv in zip(sequence.frames, sequence.motion):
        output, frame_stats = processor.process(frame, mv if use_manifest_motion else None)
        expected = dense_forward(net, frame)[-1]
        np.testing.assert_allclose(output.data, expected.data, atol=1e-4)
        stats.append(frame_stats)
    return stats


class TestExactness:
    """Zero thresholds give dense-identical outputs."""

    @pytest.mark.parametrize("scenario", ["pan", "two_region", "reveal", "scramble"])
    def test_estimated_motion(self, small_net, zero_thresholds, scenario):
        """Test each scenario with block-matched motion."""
        sequence = generate_sequence(scenario, 8, 64, 64, seed=21)
        processor = StreamProcessor(small_net, zero_thresholds)
        stats = _assert_exact(small_net, sequence, processor)
        assert stats[0].dense

    def test_manifest_motion(self, small_net, zero_thresholds, two_region_sequence):
        """Test ground-truth motion on a scene with a moving object."""
        processor = StreamProcessor(small_net, zero_thresholds)
        _assert_exact(small_net, two_region_sequence, processor, use_manifest_motion=True)

    @pytest.mark.parametrize("mode", [ReuseMode.FIXED_COORD, ReuseMode.GLOBAL_SHIFT, ReuseMode.DENSE])
    def test_comparison_modes(self, small_net, zero_thresholds, pan_sequence, mode):
        """Test the comparison modes are exact too."""
        processor = StreamProcessor(small_net, zero_thresholds, PipelineOptions(mode=mode))
        _assert_exact(small_net, pan_sequence, processor, use_manifest_motion=True)

    def test_per_layer_rfap(self, small_net, zero_thresholds, two_region_sequence):
        """Test the per-layer check variant."""
        options = PipelineOptions(rfap=RfapMode.PER_LAYER)
        processor = StreamProcessor(small_net, zero_thresholds, options)
        _assert_exact(small_net, two_region_sequence, processor, use_manifest_motion=True)

    def test_no_remap(self, small_net, zero_thresholds, pan_sequence):
        """Test stale-coordinate caches stay exact."""
        processor = StreamProcessor(small_net, zero_thresholds, PipelineOptions(remap=False))
        _assert_exact(small_net, pan_sequence, processor, use_manifest_motion=True)


class TestWorkAccounting:
    """Tests for what the pipeline recomputes."""

    def test_first_frame_is_dense(self, small_net, zero_thresholds, pan_sequence):
        """Test an unseeded endpoint runs a dense pass."""
        processor = StreamProcessor(small_net, zero_thresholds)
        _, stats = processor.process(pan_sequence.frames[0])
        assert stats.dense
        assert stats.compute_ratio == 1.0
        assert stats.reuse_ratio == 0.0
        assert processor.frame_id == 1

    def test_static_scene_recomputes_nothing(self, small_net, zero_thresholds):
        """Test identical frames reuse every cached value."""
        sequence = generate_sequence("static", 3, 64, 64, seed=2)
        processor = StreamProcessor(small_net, zero_thresholds)
        results = processor.run(sequence.frames)
        for _, stats in results[1:]:
            assert not stats.dense
            assert stats.input_recomputed == 0
            assert stats.compute_ratio == 0.0
            assert stats.reuse_ratio == 1.0
            assert stats.layer_counts == [0] * small_net.num_layers

    def test_aligned_pan_reuses_most_pixels(self, small_net, zero_thresholds, pan_sequence):
        """Test a pan by a multiple of S_max only recomputes the revealed edge."""
        processor = StreamProcessor(small_net, zero_thresholds)
        for frame, mv in zip(pan_sequence.frames, pan_sequence.motion):
            _, stats = processor.process(frame, mv)
        assert stats.reuse_ratio >= 0.9
        assert stats.compute_ratio < 0.5
        assert stats.rfap_flagged > 0

    def test_fixed_coord_misses_motion(self, small_net, zero_thresholds, pan_sequence):
        """Test a fixed-coordinate cache reuses almost nothing under a pan."""
        processor = StreamProcessor(small_net, zero_thresholds, PipelineOptions(mode=ReuseMode.FIXED_COORD))
        processor.process(pan_sequence.frames[0])
        _, stats = processor.process(pan_sequence.frames[1], pan_sequence.motion[1])
        assert stats.reuse_ratio < 0.2

    def test_no_sparse_is_dense_every_frame(self, small_net, zero_thresholds, pan_sequence):
        """Test disabling sparse inference runs dense passes only."""
        processor = StreamProcessor(small_net, zero_thresholds, PipelineOptions(sparse=False))
        for _, stats in processor.run(pan_sequence.frames[:4]):
            assert stats.dense
            assert stats.compute_ratio == 1.0

    def test_thresholds_reduce_work(self, small_net, two_region_sequence):
        """Test a large threshold recomputes less than zero thresholds."""
        ratios = []
        for tau in (0.0, 0.05, 0.5):
            thresholds = ThresholdVector(tau, {index: tau for index in small_net.profiled_layers})
            processor = StreamProcessor(small_net, thresholds)
            results = processor.run(two_region_sequence.frames[:5])
            ratios.append(sum(stats.compute_ratio for _, stats in results[1:]))
        assert ratios[0] >= ratios[2]
        assert ratios[2] < len(results) - 1


class TestSparseForward:
    """Direct tests for sparse_forward and dense_seed."""

    def test_unseeded_cache_seeds(self, small_net, zero_thresholds, rng):
        """Test the first call on an empty cache is a dense seed."""
        frame = FeatureMap(rng.random(small_net.input_shape, dtype=np.float32))
        cache = EndpointCache.for_network(small_net)
        output, stats = sparse_forward(
            small_net, cache, frame, RecomputeMask.full(64, 64), None, zero_thresholds, frame_id=0
        )
        assert stats.dense
        assert cache.seeded
        np.testing.assert_allclose(output.data, dense_forward(small_net, frame)[-1].data)

    def test_full_s0_reseeds(self, small_net, zero_thresholds, rng):
        """Test a full dispatch set with remapping is a dense re-seed."""
        frame = FeatureMap(rng.random(small_net.input_shape, dtype=np.float32))
        cache = EndpointCache.for_network(small_net)
        dense_seed(small_net, cache, frame, 0)
        _, stats = sparse_forward(
            small_net, cache, frame, RecomputeMask.full(64, 64), None, zero_thresholds, frame_id=1
        )
        assert stats.dense
        assert cache.last_update_frame == 1

    def test_frame_shape_checked(self, small_net, zero_thresholds):
        """Test frames of the wrong size are rejected."""
        cache = EndpointCache.for_network(small_net)
        with pytest.raises(InvalidArgumentError):
            sparse_forward(
                small_net, cache, FeatureMap(np.zeros((32, 32, 3))),
                RecomputeMask.full(32, 32), None, zero_thresholds,
            )

    def test_cache_geometry_checked(self, small_net, net, zero_thresholds):
        """Test a cache built for another network is an internal error."""
        cache = EndpointCache.for_network(net)
        with pytest.raises(InternalError):
            sparse_forward(
                small_net, cache, FeatureMap(np.zeros((64, 64, 3))),
                RecomputeMask.full(64, 64), None, zero_thresholds,
            )

    def test_dense_seed_reports_reuse(self, small_net, rng):
        """Test a dense seed with a dispatch set reports its reuse ratio."""
        frame = FeatureMap(rng.random(small_net.input_shape, dtype=np.float32))
        s0 = RecomputeMask.empty(64, 64)
        s0.bits[:16] = True
        _, stats = dense_seed(small_net, EndpointCache.for_network(small_net), frame, 3, s0)
        assert stats.frame_id == 3
        assert stats.reuse_ratio == pytest.approx(0.75)


class TestBaselines:
    """Tests for mode helpers."""

    def test_field_for_mode(self):
        """Test the field each mode moves its cache with."""
        mv = MVField(16, np.array([[0, 2, 2]]), np.array([[4, 4, 4]]))
        assert field_for_mode(ReuseMode.FLUXSHARD, mv) is mv
        assert field_for_mode(ReuseMode.GLOBAL_SHIFT, mv) == MVField.uniform(1, 3, 2, 4, 16)
        assert field_for_mode(ReuseMode.FIXED_COORD, mv) == MVField.zeros(1, 3, 16)

    def test_run_baseline_rejects_fluxshard(self, small_net, zero_thresholds, pan_sequence):
        """Test fluxshard is not a comparison mode."""
        cache = EndpointCache.for_network(small_net)
        with pytest.raises(InvalidArgumentError):
            run_baseline(
                ReuseMode.FLUXSHARD, small_net, cache, pan_sequence.frames[0],
                pan_sequence.motion[0], zero_thresholds,
            )

    def test_run_baseline_global_shift(self, small_net, zero_thresholds, pan_sequence):
        """Test global shift follows a uniform pan."""
        cache = EndpointCache.for_network(small_net)
        for frame_id in range(3):
            _, stats = run_baseline(
                ReuseMode.GLOBAL_SHIFT, small_net, cache, pan_sequence.frames[frame_id],
                pan_sequence.motion[frame_id], zero_thresholds, frame_id=frame_id,
            )
        assert stats.reuse_ratio >= 0.9


class TestFrameStats:
    """Tests for FrameStats and compute_ratio."""

    def test_dict_round_trip(self):
        """Test stats survive to_dict/from_dict without timings."""
        stats = FrameStats(4, 10, 100, [1, 2], [50, 25], [1, 2], 0.1, 0.9, 3, False, {"infer": 1.0})
        restored = FrameStats.from_dict(stats.to_dict())
        assert restored.layer_counts == [1, 2]
        assert restored.compute_ratio == 0.1
        assert restored.rfap_flagged == 3
        assert restored.timings_ms == {}

    def test_compute_ratio_bounds(self, small_net):
        """Test dense counts give 1 and empty counts give 0."""
        sizes = [shape[0] * shape[1] for shape in small_net.output_shapes]
        assert compute_ratio(small_net, sizes) == pytest.approx(1.0)
        assert compute_ratio(small_net, [0] * small_net.num_layers) == 0.0
        half = compute_ratio(small_net, [size // 2 for size in sizes])
        assert 0.45 < half < 0.55
