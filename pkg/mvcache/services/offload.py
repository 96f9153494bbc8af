"""Offload service - cloud-side processing of offload payloads.

process_offload is the single deterministic update shared by the
server and by the client's replica of the server cache. Running it on
the same decoded payload on both sides keeps them in lockstep.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from mvcache.adapters.wire import OffloadPayload, expand_quantized, reconstruct_input
from mvcache.core.cache_state import EndpointCache
from mvcache.core.errors import InvalidArgumentError, ProtocolDesyncError
from mvcache.core.network import NetworkSpec
from mvcache.core.pipeline import FrameStats, injection_plan, sparse_forward
from mvcache.core.reuse import ThresholdVector
from mvcache.core.settings import PipelineOptions
from mvcache.core.tensor import FeatureMap

logger = logging.getLogger(__name__)

DEFAULT_AUDIT_TOLERANCE = 1e-6


@dataclass
class OffloadSession:
    """Server-side state of one client.

    Attributes:
        client_id: Id from the client's hello
        cache: The session's cloud cache
        frames: Frames processed in this session
        rejected: Payloads rejected as out of sync
    """
    client_id: int
    cache: EndpointCache
    frames: int = 0
    rejected: int = 0
    last_stats: Optional[FrameStats] = field(default=None, repr=False)

    @property
    def last_frame_id(self) -> Optional[int]:
        return self.cache.last_update_frame if self.cache.seeded else None


def process_offload(
    net: NetworkSpec,
    cache: EndpointCache,
    payload: OffloadPayload,
    thresholds: ThresholdVector,
    options: Optional[PipelineOptions] = None,
) -> Tuple[FeatureMap, FrameStats]:
    """Apply one offloaded frame to a cloud cache.

    The transmitted block field replaces the cache's accumulator. A full
    mask always re-seeds the cache; a sparse mask needs a seeded cache
    and an increasing frame id.

    Raises:
        InvalidArgumentError: If the payload does not match the network input
        ProtocolDesyncError: If the payload does not continue the cache's history
    """
    options = options or PipelineOptions()
    h, w, _ = net.input_shape
    if (payload.height, payload.width) != (h, w):
        raise InvalidArgumentError(
            f"Payload frame {payload.height}x{payload.width} does not match network input {h}x{w}"
        )
    frame, mask = reconstruct_input(payload)
    if mask.all():
        cache.invalidate()
    elif not cache.seeded or payload.frame_id <= cache.last_update_frame:
        raise ProtocolDesyncError(
            f"{cache.name}: sparse payload for frame {payload.frame_id} "
            f"but cache last updated at {cache.last_update_frame}"
        )

    if cache.seeded:
        cache.accum = expand_quantized(payload.mv_dy, payload.mv_dx, payload.block_size)
    plan = injection_plan(net, cache, mask, options.rfap)
    return sparse_forward(net, cache, frame, mask, plan, thresholds, options, payload.frame_id)


def mirror_update(
    net: NetworkSpec,
    replica: EndpointCache,
    payload: OffloadPayload,
    thresholds: ThresholdVector,
    options: Optional[PipelineOptions] = None,
) -> Tuple[FeatureMap, FrameStats]:
    """Apply to the client's replica the update the server applies."""
    return process_offload(net, replica, payload, thresholds, options)


def audit_output(
    replica_output: FeatureMap,
    server_output: FeatureMap,
    tolerance: float = DEFAULT_AUDIT_TOLERANCE,
) -> float:
    """Compare the replica's output with the server's.

    Returns:
        Max absolute difference

    Raises:
        ProtocolDesyncError: If the outputs diverge beyond tolerance
    """
    if replica_output.shape != server_output.shape:
        raise ProtocolDesyncError(f"Result dims {server_output.shape} vs replica {replica_output.shape}")
    divergence = float(np.abs(replica_output.data - server_output.data).max(initial=0.0))
    if not divergence <= tolerance:
        raise ProtocolDesyncError(f"Replica output diverges from server by {divergence:.3e}")
    return divergence


def audit_mirror(
    replica: EndpointCache,
    server_cache: EndpointCache,
    tolerance: float = DEFAULT_AUDIT_TOLERANCE,
) -> float:
    """Compare every cache of the replica with the server's.

    Raises:
        ProtocolDesyncError: If any cache diverges beyond tolerance
    """
    divergence = replica.max_divergence(server_cache)
    if not divergence <= tolerance:
        logger.warning(
            f"Mirror audit failed: divergence {divergence:.3e} "
            f"(replica frame {replica.last_update_frame}, server frame {server_cache.last_update_frame})"
        )
        raise ProtocolDesyncError(f"Replica cache diverges from server by {divergence:.3e}")
    return divergence
