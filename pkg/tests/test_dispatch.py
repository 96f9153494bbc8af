"""Tests for latency models, endpoint selection and the frame driver."""

import numpy as np
import pytest

from mvcache.adapters.link import BandwidthTrace, LinkSim, generate_tier_trace
from mvcache.core.errors import InvalidArgumentError
from mvcache.core.events import FRAME_PROCESSED
from mvcache.core.network import dense_forward
from mvcache.core.settings import DispatchConfig, PipelineOptions, ReuseMode
from mvcache.modules.datagen import generate_sequence
from mvcache.services.dispatch import (
    BandwidthEstimator,
    Endpoint,
    FrameDriver,
    LatencyModel,
    decide,
    estimate_cloud,
    estimate_edge,
    ewma_update,
)

ROW_KEYS = [
    "frame", "mode", "endpoint", "rho_e", "rho_c", "reuse", "compute_ratio", "tx_bytes",
    "T_est_ms", "T_realized_ms", "fidelity", "tx_ratio", "tx_ms", "infer_ms",
]


class TestLatencyModel:
    """Tests for LatencyModel."""

    def test_interpolates_and_clamps(self):
        """Test linear interpolation inside and clamping outside the points."""
        model = LatencyModel.default_edge()
        assert model.predict(0.5) == pytest.approx(248.4)
        assert model.predict(0.0) == 50.0
        assert model.predict(1.5) == 446.8
        assert model.predict(-0.5) == 50.0

    @pytest.mark.parametrize(
        "points",
        [
            [(0.0, 1.0)],
            [(0.5, 1.0), (0.2, 2.0)],
            [(0.0, 1.0), (1.2, 2.0)],
            [(0.0, 0.0), (1.0, 2.0)],
        ],
    )
    def test_invalid_points(self, points):
        """Test malformed profiles are rejected."""
        with pytest.raises(InvalidArgumentError):
            LatencyModel(points)

    def test_monotone_envelope(self):
        """Test dips are raised to the running maximum."""
        model = LatencyModel([(0.0, 10.0), (0.5, 5.0), (1.0, 20.0)]).monotone()
        assert model.latencies.tolist() == [10.0, 10.0, 20.0]

    def test_csv_round_trip(self, tmp_path):
        """Test profiles saved to CSV load back."""
        path = tmp_path / "edge.csv"
        LatencyModel([(0.0, 50.0), (0.25, 120.5), (1.0, 446.8)]).to_csv(path)
        assert path.read_text().splitlines()[0] == "rho,latency_ms"
        assert LatencyModel.from_csv(path).points == [(0.0, 50.0), (0.25, 120.5), (1.0, 446.8)]

    def test_csv_bad_row(self, tmp_path):
        """Test a malformed row names its position."""
        path = tmp_path / "edge.csv"
        path.write_text("rho,latency_ms\n0,50\nhalf,60\n", encoding="utf-8")
        with pytest.raises(InvalidArgumentError, match="row 3"):
            LatencyModel.from_csv(path)


class TestEstimates:
    """Tests for the per-endpoint latency estimates."""

    def test_edge(self):
        """Test the edge estimate is the model at rho_e."""
        assert estimate_edge(LatencyModel.default_edge(), 1.0) == 446.8
        with pytest.raises(InvalidArgumentError):
            estimate_edge(LatencyModel.default_edge(), 1.1)

    def test_cloud_adds_transfer_and_propagation(self):
        """Test the cloud estimate adds payload transfer and one-way delay."""
        model = LatencyModel.default_cloud()
        t = estimate_cloud(model, 0.5, 1_000_000, 80e6, 20.0)
        assert t == pytest.approx(16.3 + 100.0 + 20.0)
        assert estimate_cloud(model, 0.5, 1_000_000, float("inf"), 0.0) == pytest.approx(16.3)

    def test_cloud_rejects_bad_bandwidth(self):
        """Test a non-positive bandwidth estimate is an error."""
        with pytest.raises(InvalidArgumentError):
            estimate_cloud(LatencyModel.default_cloud(), 0.5, 10, 0.0)


class TestBandwidthEstimator:
    """Tests for the EWMA bandwidth estimate."""

    def test_first_sample_initializes(self):
        """Test the first sample becomes the estimate."""
        assert ewma_update(BandwidthEstimator(), 10e6).estimate == 10e6

    def test_weighting(self):
        """Test later samples are blended with the configured weight."""
        est = ewma_update(ewma_update(BandwidthEstimator(0.3), 10e6), 20e6)
        assert est.estimate == pytest.approx(13e6)

    def test_non_positive_samples_ignored(self):
        """Test zero and negative samples leave the estimate alone."""
        est = ewma_update(BandwidthEstimator(), 10e6)
        assert ewma_update(est, 0.0) is est
        assert ewma_update(est, -5.0) is est

    @pytest.mark.parametrize("weight", [0.0, -0.1, 1.5])
    def test_weight_range(self, weight):
        """Test the weight must lie in (0, 1]."""
        with pytest.raises(InvalidArgumentError):
            BandwidthEstimator(weight)


class TestDecide:
    """Tests for the selection rule."""

    def test_tie_goes_to_cloud(self):
        """Test a margin of exactly epsilon keeps the frame on the cloud."""
        assert decide(95.0, 100.0, 5.0) == Endpoint.CLOUD
        assert decide(94.0, 100.0, 5.0) == Endpoint.EDGE
        assert decide(100.0, 100.0, 0.0) == Endpoint.CLOUD

    def test_matches_brute_force(self):
        """Test 10k random triples against picking the cheaper endpoint."""
        rng = np.random.default_rng(99)
        triples = rng.integers(0, 200, size=(10_000, 3)).astype(np.float64)
        for t_edge, t_cloud, eps in triples:
            # the cloud wins ties, so it sorts first at equal cost
            candidates = sorted([(t_edge + eps, 1, Endpoint.EDGE), (t_cloud, 0, Endpoint.CLOUD)])
            assert decide(t_edge, t_cloud, eps) == candidates[0][2]


@pytest.mark.asyncio
class TestFrameDriver:
    """Tests for FrameDriver with the in-process cloud path."""

    async def test_outputs_are_exact(self, small_net, zero_thresholds, two_region_sequence, bus):
        """Test every frame on the in-process cloud path matches the dense output."""
        driver = FrameDriver(small_net, zero_thresholds, bus=bus)
        for frame in two_region_sequence.frames[:6]:
            output, _, _ = await driver.run_frame(frame)
            np.testing.assert_allclose(output.data, dense_forward(small_net, frame)[-1].data, atol=1e-4)
        assert driver.frame_id == 6
        assert len(bus.get_event_history(FRAME_PROCESSED)) == 6
        assert all(record.fidelity == pytest.approx(1.0, abs=1e-4) for record in driver.records)

    async def test_record_rows(self, small_net, zero_thresholds, pan_sequence, bus):
        """Test records carry the per-frame CSV columns."""
        driver = FrameDriver(small_net, zero_thresholds, bus=bus)
        records = await driver.run(pan_sequence.frames[:3])
        assert [record.frame for record in records] == [0, 1, 2]
        row = records[0].to_row()
        assert list(row) == ROW_KEYS
        assert row["mode"] == "fluxshard"
        assert row["rho_c"] == 1.0
        if row["endpoint"] == "cloud":
            assert row["tx_bytes"] > 0
            assert row["T_realized_ms"] == pytest.approx(row["tx_ms"] + row["infer_ms"])

    async def test_low_bandwidth_heavy_payload_stays_on_edge(self, small_net, zero_thresholds, bus):
        """Test a 0.1 Mbps link keeps a scrambled stream on the edge."""
        sequence = generate_sequence("scramble", 6, 64, 64, seed=4)
        link = LinkSim(BandwidthTrace.constant(0.1e6))
        driver = FrameDriver(small_net, zero_thresholds, link=link, bus=bus)
        records = await driver.run(sequence.frames)
        edge_frames = [r for r in records if r.decision.endpoint == Endpoint.EDGE]
        assert len(edge_frames) >= 1
        assert all(r.tx_bytes == 0 for r in edge_frames)
        assert records[0].decision.t_cloud > records[0].decision.t_edge

    async def test_high_tier_small_payloads_go_to_cloud(self, small_net, zero_thresholds, bus):
        """Test a fast uplink with small payloads offloads nearly every frame."""
        sequence = generate_sequence("pan", 30, 64, 64, seed=8, dy=0, dx=4)
        link = LinkSim(generate_tier_trace("high", 10_000.0, 100.0, seed=5))
        config = DispatchConfig(compute_fidelity=False)
        driver = FrameDriver(small_net, zero_thresholds, config=config, link=link, bus=bus)
        for frame, mv in zip(sequence.frames, sequence.motion):
            await driver.run_frame(frame, mv)
        records = driver.records
        cloud = sum(1 for r in records if r.decision.endpoint == Endpoint.CLOUD)
        assert cloud >= 0.95 * len(records)

    @pytest.mark.parametrize(
        "mode, endpoint",
        [(ReuseMode.LOCAL, Endpoint.EDGE), (ReuseMode.DENSE, Endpoint.CLOUD)],
    )
    async def test_dense_modes_are_forced(self, small_net, zero_thresholds, pan_sequence, bus, mode, endpoint):
        """Test local always runs on the edge and dense always offloads."""
        driver = FrameDriver(small_net, zero_thresholds, PipelineOptions(mode=mode), bus=bus)
        for frame in pan_sequence.frames[:3]:
            output, decision, stats = await driver.run_frame(frame)
            assert decision.endpoint == endpoint
            assert decision.reason == "forced"
            assert stats.dense
            np.testing.assert_allclose(output.data, dense_forward(small_net, frame)[-1].data, atol=1e-4)

    async def test_edge_only(self, small_net, zero_thresholds, pan_sequence, bus):
        """Test edge_only keeps sparse frames on the edge."""
        config = DispatchConfig(edge_only=True)
        driver = FrameDriver(small_net, zero_thresholds, config=config, bus=bus)
        records = await driver.run(pan_sequence.frames[:4])
        assert all(r.decision.endpoint == Endpoint.EDGE for r in records)
        assert not records[-1].stats.dense
        assert not driver.replica.seeded

    async def test_wrong_frame_shape(self, net, zero_thresholds, pan_sequence, bus):
        """Test frames must match the network input."""
        driver = FrameDriver(net, zero_thresholds, bus=bus)
        with pytest.raises(InvalidArgumentError):
            await driver.run_frame(pan_sequence.frames[0])
