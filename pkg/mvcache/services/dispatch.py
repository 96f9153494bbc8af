"""Dispatch service - per-frame endpoint selection and the frame driver.

Every frame the driver estimates motion, accumulates it into both the
edge cache and the client's replica of the cloud cache, sizes the
workload of each endpoint from its dispatch-layer recomputation set,
and runs the frame where the latency model says it finishes first.
Ties within ε go to the cloud.
"""

import csv
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from mvcache.adapters.client import OffloadClient
from mvcache.adapters.link import BandwidthTrace, LinkSim
from mvcache.adapters.wire import (
    build_payload,
    decode_offload,
    encode_offload,
    expand_quantized,
    pack_mask,
    quantize_accum,
    unpack_mask,
)
from mvcache.core.cache_state import EndpointCache
from mvcache.core.errors import InvalidArgumentError, ProtocolDesyncError, ProtocolError, TransportError
from mvcache.core.events import (
    DesyncDetectedEvent,
    EventBus,
    FrameProcessedEvent,
    OffloadFallbackEvent,
    get_event_bus,
)
from mvcache.core.motion import MVField, estimate_mv
from mvcache.core.network import NetworkSpec, dense_forward
from mvcache.core.pipeline import (
    FrameStats,
    endpoint_recompute_set,
    field_for_mode,
    injection_plan,
    sparse_forward,
)
from mvcache.core.reuse import ThresholdVector
from mvcache.core.settings import DispatchConfig, PipelineOptions, ReuseMode
from mvcache.core.tensor import FeatureMap, RecomputeMask
from mvcache.services.calibration import fidelity
from mvcache.services.offload import audit_output, mirror_update

logger = logging.getLogger(__name__)

DEFAULT_EDGE_POINTS = [(0.0, 50.0), (1.0, 446.8)]
DEFAULT_CLOUD_POINTS = [(0.0, 5.0), (1.0, 27.6)]


class Endpoint(str, Enum):
    EDGE = "edge"
    CLOUD = "cloud"


class LatencyModel:
    """Piecewise-linear latency-vs-sparsity curve, clamped at the ends.

    Example:
        >>> model = LatencyModel([(0.0, 50.0), (1.0, 446.8)])
        >>> model.predict(0.5)
        248.4
    """

    def __init__(self, points: Sequence[Tuple[float, float]]) -> None:
        if len(points) < 2:
            raise InvalidArgumentError(f"A latency model needs >= 2 points, got {len(points)}")
        rhos = np.array([p[0] for p in points], dtype=np.float64)
        latencies = np.array([p[1] for p in points], dtype=np.float64)
        if np.any(np.diff(rhos) <= 0):
            raise InvalidArgumentError(f"Latency model rho values must be strictly ascending: {rhos.tolist()}")
        if np.any(rhos < 0) or np.any(rhos > 1):
            raise InvalidArgumentError("Latency model rho values must lie in [0, 1]")
        if np.any(latencies <= 0):
            raise InvalidArgumentError("Latency model latencies must be positive")
        self.rhos = rhos
        self.latencies = latencies

    @classmethod
    def default_edge(cls) -> "LatencyModel":
        return cls(DEFAULT_EDGE_POINTS)

    @classmethod
    def default_cloud(cls) -> "LatencyModel":
        return cls(DEFAULT_CLOUD_POINTS)

    @property
    def points(self) -> List[Tuple[float, float]]:
        return [(float(r), float(t)) for r, t in zip(self.rhos, self.latencies)]

    def predict(self, rho: float) -> float:
        return float(np.interp(rho, self.rhos, self.latencies))

    def monotone(self) -> "LatencyModel":
        """Running-max envelope, non-decreasing in rho."""
        return LatencyModel(list(zip(self.rhos.tolist(), np.maximum.accumulate(self.latencies).tolist())))

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["rho", "latency_ms"])
            for rho, latency in self.points:
                writer.writerow([f"{rho:.6f}", f"{latency:.6f}"])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "LatencyModel":
        """Load a `rho,latency_ms` profile.

        Raises:
            InvalidArgumentError: On malformed rows
        """
        points = []
        with open(path, newline="", encoding="utf-8") as f:
            for row_no, row in enumerate(csv.reader(f), start=1):
                if not row or row[0].strip() in ("rho", "") or row[0].startswith("#"):
                    continue
                try:
                    points.append((float(row[0]), float(row[1])))
                except (ValueError, IndexError):
                    raise InvalidArgumentError(f"{path}: row {row_no} is not a rho,latency_ms pair: {row}")
        return cls(points)


def estimate_edge(model: LatencyModel, rho_e: float) -> float:
    """f_edge(ρ_e).

    Raises:
        InvalidArgumentError: If rho_e is outside [0, 1]
    """
    if not 0.0 <= rho_e <= 1.0:
        raise InvalidArgumentError(f"rho must lie in [0, 1], got {rho_e}")
    return model.predict(rho_e)


def estimate_cloud(
    model: LatencyModel,
    rho_c: float,
    payload_bytes: int,
    bandwidth_bps: float,
    propagation_ms: float = 20.0,
) -> float:
    """f_cloud(ρ_c) + transfer of the encoded payload + one-way delay.

    Raises:
        InvalidArgumentError: If rho_c is outside [0, 1] or bandwidth_bps <= 0
    """
    if not 0.0 <= rho_c <= 1.0:
        raise InvalidArgumentError(f"rho must lie in [0, 1], got {rho_c}")
    if not bandwidth_bps > 0:
        raise InvalidArgumentError(f"Bandwidth estimate must be positive, got {bandwidth_bps}")
    transfer_ms = payload_bytes * 8.0 / bandwidth_bps * 1000.0 if math.isfinite(bandwidth_bps) else 0.0
    return model.predict(rho_c) + transfer_ms + propagation_ms


@dataclass(frozen=True)
class BandwidthEstimator:
    """EWMA of uplink throughput samples.

    Attributes:
        weight: Weight of the newest sample
        estimate: Current estimate in bps, None before the first sample
    """
    weight: float = 0.3
    estimate: Optional[float] = None

    def __post_init__(self) -> None:
        if not 0.0 < self.weight <= 1.0:
            raise InvalidArgumentError(f"EWMA weight must lie in (0, 1], got {self.weight}")


def ewma_update(est: BandwidthEstimator, sample_bps: float) -> BandwidthEstimator:
    """Fold one sample into the estimate; non-positive samples are ignored."""
    if not sample_bps > 0:
        logger.warning(f"Ignoring non-positive bandwidth sample {sample_bps}")
        return est
    if est.estimate is None:
        return replace(est, estimate=float(sample_bps))
    return replace(est, estimate=est.weight * sample_bps + (1.0 - est.weight) * est.estimate)


def decide(t_edge: float, t_cloud: float, epsilon: float) -> Endpoint:
    """Edge iff it beats the cloud by more than epsilon."""
    return Endpoint.EDGE if t_edge < t_cloud - epsilon else Endpoint.CLOUD


@dataclass
class DispatchDecision:
    """Outcome of the per-frame selection.

    Attributes:
        endpoint: Where the frame ran
        t_edge: Estimated edge latency in ms
        t_cloud: Estimated cloud latency in ms
        payload_bytes: Encoded offload bytes (0 on the edge path)
        rho_e: Edge dispatch-layer recompute fraction
        rho_c: Cloud dispatch-layer recompute fraction (transmitted mask)
        bandwidth_bps: Bandwidth estimate used for t_cloud
        reason: "decision", "forced" (mode or edge-only) or "fallback"
    """
    endpoint: Endpoint
    t_edge: float
    t_cloud: float
    payload_bytes: int
    rho_e: float
    rho_c: float
    bandwidth_bps: float = 0.0
    reason: str = "decision"

    @property
    def t_estimated(self) -> float:
        return self.t_edge if self.endpoint == Endpoint.EDGE else self.t_cloud


@dataclass
class FrameRecord:
    """Everything the driver knows about one frame (one CSV row)."""
    frame: int
    mode: str
    decision: DispatchDecision
    stats: FrameStats
    tx_bytes: int
    tx_ratio: float
    tx_ms: float
    infer_ms: float
    fidelity: Optional[float] = None

    @property
    def realized_ms(self) -> float:
        return self.tx_ms + self.infer_ms

    def to_row(self) -> Dict[str, Any]:
        return {
            "frame": self.frame,
            "mode": self.mode,
            "endpoint": self.decision.endpoint.value,
            "rho_e": self.decision.rho_e,
            "rho_c": self.decision.rho_c,
            "reuse": self.stats.reuse_ratio,
            "compute_ratio": self.stats.compute_ratio,
            "tx_bytes": self.tx_bytes,
            "T_est_ms": self.decision.t_estimated,
            "T_realized_ms": self.realized_ms,
            "fidelity": self.fidelity,
            "tx_ratio": self.tx_ratio,
            "tx_ms": self.tx_ms,
            "infer_ms": self.infer_ms,
        }


class FrameDriver:
    """Drives a frame stream across the edge and the cloud.

    Without a client the cloud path runs in-process on the replica.

    Example:
        >>> driver = FrameDriver(net, thresholds, link=LinkSim(trace))
        >>> await driver.connect()
        >>> output, decision, stats = await driver.run_frame(frame)
    """

    def __init__(
        self,
        net: NetworkSpec,
        thresholds: ThresholdVector,
        options: Optional[PipelineOptions] = None,
        config: Optional[DispatchConfig] = None,
        edge_model: Optional[LatencyModel] = None,
        cloud_model: Optional[LatencyModel] = None,
        link: Optional[LinkSim] = None,
        client: Optional[OffloadClient] = None,
        bus: Optional[EventBus] = None,
    ) -> None:
        self.net = net
        self.thresholds = thresholds
        self.options = options or PipelineOptions()
        self.config = config or DispatchConfig()
        self.edge_model = edge_model or LatencyModel.default_edge()
        self.cloud_model = cloud_model or LatencyModel.default_cloud()
        self.link = link or LinkSim(BandwidthTrace.constant(596.9e6), self.config.propagation_ms)
        self.client = client
        self.bus = bus or get_event_bus()

        self.edge = EndpointCache.for_network(net, "edge")
        self.replica = EndpointCache.for_network(net, "replica")
        self.estimator = BandwidthEstimator(self.config.ewma_weight)
        self.records: List[FrameRecord] = []
        self._previous: Optional[FeatureMap] = None
        self._frame_id = 0
        self._needs_handshake = client is not None

        h, w, c = net.input_shape
        self._n_px = h * w
        self._n_values = h * w * c

    @property
    def frame_id(self) -> int:
        return self._frame_id

    async def connect(self) -> None:
        """Handshake and reconcile the replica with the server's session."""
        if self.client is None:
            return
        last = await self.client.connect()
        self._needs_handshake = False
        if self.replica.seeded and last != self.replica.last_update_frame:
            self._desync(self._frame_id, last)

    async def close(self) -> None:
        if self.client is not None:
            await self.client.close()

    def _desync(self, frame_id: int, server_last: Optional[int]) -> None:
        logger.warning(
            f"Frame {frame_id}: replica (last {self.replica.last_update_frame}) out of sync "
            f"with server (last {server_last}); next cloud frame re-seeds"
        )
        self.bus.publish(DesyncDetectedEvent(frame_id, self.replica.last_update_frame, server_last))
        self.replica.invalidate()

    def motion(self, frame: FeatureMap) -> MVField:
        b = self.config.block_size
        if self._previous is None:
            h, w, _ = frame.shape
            return MVField.zeros(h // b, w // b, b)
        return estimate_mv(frame, self._previous, b, self.config.search_radius)

    def _forced_endpoint(self) -> Optional[Endpoint]:
        if self.config.edge_only or self.options.mode == ReuseMode.LOCAL:
            return Endpoint.EDGE
        if self.options.mode == ReuseMode.DENSE:
            return Endpoint.CLOUD
        return None

    def _model_rho(self, rho: float) -> float:
        return rho if self.options.sparse else 1.0

    def _run_edge(self, frame: FeatureMap, s0: RecomputeMask, frame_id: int) -> Tuple[FeatureMap, FrameStats]:
        plan = injection_plan(self.net, self.edge, s0, self.options.rfap)
        return sparse_forward(self.net, self.edge, frame, s0, plan, self.thresholds, self.options, frame_id)

    async def _run_cloud(self, data: bytes) -> Tuple[FeatureMap, FrameStats]:
        """Offload encoded bytes and mirror the update on the replica.

        Raises:
            TransportError: On connection trouble
            ProtocolError: On rejection, wrong result dims or a failed audit
        """
        payload = decode_offload(data)
        if self.client is None:
            return mirror_update(self.net, self.replica, payload, self.thresholds, self.options)

        if self._needs_handshake:
            await self.connect()
        result = await self.client.offload(data)
        expected = tuple(self.net.output_shapes[-1])
        if tuple(result.output.shape) != expected:
            raise ProtocolError(f"Frame {payload.frame_id}: result dims {result.output.shape}, expected {expected}")
        output, stats = mirror_update(self.net, self.replica, payload, self.thresholds, self.options)
        if self.config.audit:
            audit_output(output, result.output, self.config.audit_tolerance)
        return result.output, FrameStats.from_dict(result.stats)

    async def run_frame(
        self, frame: FeatureMap, mv: Optional[MVField] = None
    ) -> Tuple[FeatureMap, DispatchDecision, FrameStats]:
        """Process the next frame of the stream.

        Args:
            frame: Incoming frame
            mv: Per-frame block field (estimated against the previous frame if None)

        Returns:
            (output, decision, stats)
        """
        if frame.shape != self.net.input_shape:
            raise InvalidArgumentError(f"Frame {frame.shape} does not match network input {self.net.input_shape}")
        frame_id = self._frame_id
        now_ms = frame_id * self.config.frame_interval_ms
        if mv is None:
            mv = self.motion(frame)
        moved = field_for_mode(self.options.mode, mv)

        if self.edge.seeded:
            self.edge.advance(moved)
        if self.replica.seeded:
            self.replica.advance(moved)
            b = self.config.block_size
            self.replica.accum = expand_quantized(*quantize_accum(self.replica.accum, b), b)

        tau0 = self.thresholds.tau0
        s0_e = endpoint_recompute_set(self.edge, frame, tau0, self.options)
        s0_c = endpoint_recompute_set(self.replica, frame, tau0, self.options)
        h, w, _ = frame.shape
        s0_tx = unpack_mask(pack_mask(s0_c), h, w)
        rho_e = s0_e.count() / self._n_px
        rho_c = s0_tx.count() / self._n_px

        payload = build_payload(
            frame_id, frame, s0_tx, self.replica.accum, self.config.block_size, self.config.pixel_format
        )
        data = encode_offload(payload)

        if self.estimator.estimate is None:
            self.estimator = ewma_update(self.estimator, self.link.probe(now_ms))
        bandwidth = float(self.estimator.estimate)
        t_edge = estimate_edge(self.edge_model, self._model_rho(rho_e))
        t_cloud = estimate_cloud(
            self.cloud_model, self._model_rho(rho_c), len(data), bandwidth, self.config.propagation_ms
        )
        forced = self._forced_endpoint()
        endpoint = forced or decide(t_edge, t_cloud, self.config.epsilon_ms)
        decision = DispatchDecision(
            endpoint=endpoint,
            t_edge=t_edge,
            t_cloud=t_cloud,
            payload_bytes=len(data) if endpoint == Endpoint.CLOUD else 0,
            rho_e=rho_e,
            rho_c=rho_c,
            bandwidth_bps=bandwidth,
            reason="forced" if forced else "decision",
        )

        tx_ms = 0.0
        tx_bytes = 0
        tx_ratio = 0.0
        sample: Optional[float] = None
        output: Optional[FeatureMap] = None
        stats: Optional[FrameStats] = None

        if endpoint == Endpoint.CLOUD:
            try:
                output, stats = await self._run_cloud(data)
                tx_ms, sample = self.link.send(len(data), now_ms)
                tx_bytes = len(data)
                tx_ratio = payload.pixel_values / self._n_values
                infer_ms = self.cloud_model.predict(self._model_rho(rho_c))
            except (TransportError, ProtocolError) as e:
                if isinstance(e, TransportError):
                    self._needs_handshake = True
                reason = f"{type(e).__name__}: {e}"
                logger.warning(f"Frame {frame_id}: cloud path failed ({reason}); running on edge")
                self.bus.publish(OffloadFallbackEvent(frame_id, reason))
                if isinstance(e, ProtocolDesyncError):
                    self._desync(frame_id, None)
                else:
                    self.replica.invalidate()
                decision.endpoint = Endpoint.EDGE
                decision.payload_bytes = 0
                decision.reason = "fallback"
                output = None

        if output is None:
            output, stats = self._run_edge(frame, s0_e, frame_id)
            infer_ms = self.edge_model.predict(self._model_rho(rho_e))

        if sample is None:
            sample = self.link.probe(now_ms)
        self.estimator = ewma_update(self.estimator, sample)

        score = None
        if self.config.compute_fidelity:
            score = fidelity(output, dense_forward(self.net, frame)[-1])

        record = FrameRecord(
            frame=frame_id,
            mode=self.options.mode.value,
            decision=decision,
            stats=stats,
            tx_bytes=tx_bytes,
            tx_ratio=tx_ratio,
            tx_ms=tx_ms,
            infer_ms=infer_ms,
            fidelity=score,
        )
        self.records.append(record)
        self.bus.publish(FrameProcessedEvent(frame_id, decision.endpoint.value, record.to_row()))
        logger.debug(
            f"Frame {frame_id}: {decision.endpoint.value} ({decision.reason}) "
            f"T_edge={t_edge:.2f} T_cloud={t_cloud:.2f} rho_e={rho_e:.4f} rho_c={rho_c:.4f}"
        )

        self._previous = frame
        self._frame_id += 1
        return output, decision, stats

    async def run(self, frames: Iterable[FeatureMap]) -> List[FrameRecord]:
        """Drive a whole stream; returns the records of these frames."""
        start = len(self.records)
        for frame in frames:
            await self.run_frame(frame)
        return self.records[start:]
