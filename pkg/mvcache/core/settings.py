"""Settings module - validated configuration models.

Every experiment knob lives in a frozen pydantic model so that a run is
fully described by (network config, thresholds, these models, trace).
"""

from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from mvcache.core.rfap import RfapMode

DEFAULT_CANDIDATES = [0.0, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1]


class ReuseMode(str, Enum):
    """Per-frame execution strategy.

    fluxshard uses per-block motion; fixed-coord never moves the cache;
    global-shift moves it by the modal block MV; dense always offloads the
    full frame; local always runs the full frame on the edge.
    """
    FLUXSHARD = "fluxshard"
    DENSE = "dense"
    FIXED_COORD = "fixed-coord"
    GLOBAL_SHIFT = "global-shift"
    LOCAL = "local"

    @property
    def is_dense(self) -> bool:
        return self in (ReuseMode.DENSE, ReuseMode.LOCAL)


class PixelFormat(str, Enum):
    FLOAT32 = "f32"
    UINT8 = "u8"


class PipelineOptions(BaseModel):
    """Options of the per-endpoint sparse pipeline.

    Attributes:
        mode: Reuse strategy
        rfap: RFAP variant
        remap: Warp caches into the current frame (False = no-remap ablation)
        sparse: Run sparse inference (False = dense on the chosen endpoint)
    """
    model_config = ConfigDict(frozen=True)

    mode: ReuseMode = ReuseMode.FLUXSHARD
    rfap: RfapMode = RfapMode.COMPACT
    remap: bool = True
    sparse: bool = True


class DispatchConfig(BaseModel):
    """Frame driver settings."""
    model_config = ConfigDict(frozen=True)

    epsilon_ms: float = Field(default=5.0, ge=0.0)
    ewma_weight: float = Field(default=0.3, gt=0.0, le=1.0)
    propagation_ms: float = Field(default=20.0, ge=0.0)
    frame_interval_ms: float = Field(default=1000.0 / 30.0, gt=0.0)
    block_size: int = Field(default=16, ge=1)
    search_radius: int = Field(default=8, ge=0)
    pixel_format: PixelFormat = PixelFormat.FLOAT32
    edge_only: bool = False
    audit: bool = True
    compute_fidelity: bool = True
    audit_tolerance: float = Field(default=1e-6, gt=0.0)


class CalibrationConfig(BaseModel):
    """Greedy calibration settings.

    Attributes:
        alpha: Accuracy retention ratio in (0, 1]
        split_ratio: Fraction of the budget reserved for the dispatch threshold
        candidates: Candidate thresholds per stage (dispatch stage first);
            one list is reused for every stage when only one is given
        tolerance: Slack added to budgets when comparing measured drops
        workers: Thread pool size for candidate evaluation (1 = sequential)
        search_radius: Block-matching radius used while replaying sequences
    """
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=0.97, gt=0.0, le=1.0)
    split_ratio: float = Field(default=2.0 / 3.0, gt=0.0, lt=1.0)
    candidates: List[List[float]] = Field(default_factory=lambda: [list(DEFAULT_CANDIDATES)])
    tolerance: float = Field(default=1e-6, ge=0.0)
    workers: int = Field(default=1, ge=1)
    search_radius: int = Field(default=8, ge=0)
    block_size: int = Field(default=16, ge=1)

    @field_validator("candidates")
    @classmethod
    def _check_candidates(cls, value: List[List[float]]) -> List[List[float]]:
        if not value:
            raise ValueError("at least one candidate list is required")
        for cands in value:
            if not cands:
                raise ValueError("candidate lists must not be empty")
            if cands[0] != 0:
                raise ValueError(f"candidate lists must start at 0, got {cands[0]}")
            if any(b <= a for a, b in zip(cands, cands[1:])):
                raise ValueError(f"candidates must be strictly ascending: {cands}")
        return value

    def candidates_for(self, stage: int) -> List[float]:
        if stage < len(self.candidates):
            return list(self.candidates[stage])
        return list(self.candidates[-1])


class LinkConfig(BaseModel):
    """Link simulator settings."""
    model_config = ConfigDict(frozen=True)

    propagation_ms: float = Field(default=20.0, ge=0.0)
    trace_path: Optional[str] = None
    tier: Optional[str] = None
