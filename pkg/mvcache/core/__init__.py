"""Core module - tensors, motion, network, reuse criterion and the sparse pipeline."""

from mvcache.core.errors import (
    MVCacheError,
    InvalidArgumentError,
    ConfigParseError,
    InternalError,
    CalibrationInfeasibleError,
    ProtocolError,
    UnsupportedVersionError,
    HandshakeRejectedError,
    ProtocolDesyncError,
    TransportError,
    UsageError,
)
from mvcache.core.tensor import FeatureMap, RecomputeMask, Rect, mask_union, mask_union_all
from mvcache.core.motion import MVField, AccumMV, estimate_mv, accumulate, downsample_field, warp_backward
from mvcache.core.network import NetworkSpec, LayerSpec, build_network, load_network, dense_forward
from mvcache.core.reuse import ThresholdVector, read_thresholds, write_thresholds
from mvcache.core.rfap import RfapMode, InjectionPlan
from mvcache.core.cache_state import EndpointCache
from mvcache.core.transaction import CacheTransaction
from mvcache.core.locks import SessionLockManager
from mvcache.core.events import Event, EventBus, get_event_bus, reset_event_bus
from mvcache.core.settings import (
    ReuseMode,
    PixelFormat,
    PipelineOptions,
    DispatchConfig,
    CalibrationConfig,
    LinkConfig,
)
from mvcache.core.pipeline import FrameStats, StreamProcessor, sparse_forward, run_baseline

__all__ = [
    "MVCacheError",
    "InvalidArgumentError",
    "ConfigParseError",
    "InternalError",
    "CalibrationInfeasibleError",
    "ProtocolError",
    "UnsupportedVersionError",
    "HandshakeRejectedError",
    "ProtocolDesyncError",
    "TransportError",
    "UsageError",
    "FeatureMap",
    "RecomputeMask",
    "Rect",
    "mask_union",
    "mask_union_all",
    "MVField",
    "AccumMV",
    "estimate_mv",
    "accumulate",
    "downsample_field",
    "warp_backward",
    "NetworkSpec",
    "LayerSpec",
    "build_network",
    "load_network",
    "dense_forward",
    "ThresholdVector",
    "read_thresholds",
    "write_thresholds",
    "RfapMode",
    "InjectionPlan",
    "EndpointCache",
    "CacheTransaction",
    "SessionLockManager",
    "Event",
    "EventBus",
    "get_event_bus",
    "reset_event_bus",
    "ReuseMode",
    "PixelFormat",
    "PipelineOptions",
    "DispatchConfig",
    "CalibrationConfig",
    "LinkConfig",
    "FrameStats",
    "StreamProcessor",
    "sparse_forward",
    "run_baseline",
]
