"""mvcache - motion-aware feature-cache reuse for edge-cloud video inference.

A CNN runs on a video stream across an edge device and a cloud server.
Each endpoint caches every layer's output; per-block motion vectors
warp the caches into the current frame so that only the positions that
actually changed are recomputed, and a per-frame scheduler picks the
endpoint with the lower estimated latency.

Version: 0.1.0
"""

__version__ = "0.1.0"
__license__ = "MIT"

from mvcache.core import (
    MVCacheError,
    FeatureMap,
    RecomputeMask,
    MVField,
    NetworkSpec,
    build_network,
    load_network,
    dense_forward,
    ThresholdVector,
    EndpointCache,
    PipelineOptions,
    ReuseMode,
    StreamProcessor,
    sparse_forward,
)
from mvcache.services import FrameDriver, LatencyModel, calibrate

__all__ = [
    "__version__",
    "MVCacheError",
    "FeatureMap",
    "RecomputeMask",
    "MVField",
    "NetworkSpec",
    "build_network",
    "load_network",
    "dense_forward",
    "ThresholdVector",
    "EndpointCache",
    "PipelineOptions",
    "ReuseMode",
    "StreamProcessor",
    "sparse_forward",
    "FrameDriver",
    "LatencyModel",
    "calibrate",
]
