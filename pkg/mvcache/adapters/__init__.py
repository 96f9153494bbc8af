"""Adapters module - wire codec, link simulator and snapshot storage.

The offload server and clients live in mvcache.adapters.server and
mvcache.adapters.client; they depend on mvcache.services and are not
re-exported here.
"""

from mvcache.adapters.wire import OffloadPayload, encode_offload, decode_offload, pack_mask, unpack_mask
from mvcache.adapters.link import BandwidthTrace, LinkSim, generate_tier_trace, load_trace
from mvcache.adapters.file_repository import FileSnapshotRepository

__all__ = [
    "OffloadPayload",
    "encode_offload",
    "decode_offload",
    "pack_mask",
    "unpack_mask",
    "BandwidthTrace",
    "LinkSim",
    "generate_tier_trace",
    "load_trace",
    "FileSnapshotRepository",
]
