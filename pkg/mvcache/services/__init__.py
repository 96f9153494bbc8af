"""Services module - offload processing, dispatch, calibration and profiling."""

from mvcache.services.offload import OffloadSession, process_offload, mirror_update, audit_mirror
from mvcache.services.calibration import Calibrator, CalibrationResult, calibrate, fidelity, budget_split
from mvcache.services.dispatch import (
    Endpoint,
    LatencyModel,
    BandwidthEstimator,
    DispatchDecision,
    FrameDriver,
    decide,
    estimate_cloud,
    estimate_edge,
    ewma_update,
)
from mvcache.services.profiling import ProfileSource, profile_endpoint

__all__ = [
    "OffloadSession",
    "process_offload",
    "mirror_update",
    "audit_mirror",
    "Calibrator",
    "CalibrationResult",
    "calibrate",
    "fidelity",
    "budget_split",
    "Endpoint",
    "LatencyModel",
    "BandwidthEstimator",
    "DispatchDecision",
    "FrameDriver",
    "decide",
    "estimate_cloud",
    "estimate_edge",
    "ewma_update",
    "ProfileSource",
    "profile_endpoint",
]
