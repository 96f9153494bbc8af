"""Calibration service - greedy threshold calibration under an accuracy budget.

Task accuracy is replaced by a fidelity score against the dense
output, so the dense reference scores 1.0 by construction and the total
admissible drop is 1 − α. Stages are calibrated in order (dispatch
threshold first, then each profiled layer); a stage takes the largest
candidate whose measured drop stays within the budget accumulated so
far.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mvcache.core.errors import CalibrationInfeasibleError, InvalidArgumentError
from mvcache.core.events import CalibrationStageEvent, EventBus, get_event_bus
from mvcache.core.network import NetworkSpec, dense_forward
from mvcache.core.pipeline import StreamProcessor
from mvcache.core.reuse import ThresholdVector, parse_thresholds, write_thresholds
from mvcache.core.settings import CalibrationConfig, PipelineOptions
from mvcache.core.tensor import FeatureMap

logger = logging.getLogger(__name__)

EPS_NUM = 1e-9
DISPATCH_STAGE = "tau0"


def fidelity(sparse_out: FeatureMap, dense_out: FeatureMap) -> float:
    """1 − min(1, ‖sparse − dense‖₁ / (‖dense‖₁ + 1e−9)).

    Raises:
        InvalidArgumentError: On dim mismatch
    """
    if sparse_out.shape != dense_out.shape:
        raise InvalidArgumentError(f"Fidelity needs equal dims, got {sparse_out.shape} vs {dense_out.shape}")
    diff = np.abs(sparse_out.data.astype(np.float64) - dense_out.data.astype(np.float64)).sum()
    norm = np.abs(dense_out.data.astype(np.float64)).sum()
    return float(1.0 - min(1.0, diff / (norm + EPS_NUM)))


def budget_split(alpha: float, k: int, r: float = 2.0 / 3.0) -> Tuple[float, List[float]]:
    """Split the admissible drop 1 − α between τ_0 and k profiled layers.

    Returns:
        (b_0, [b_l] * k)

    Raises:
        InvalidArgumentError: On alpha outside (0, 1], r outside (0, 1) or k < 0
    """
    if not 0.0 < alpha <= 1.0:
        raise InvalidArgumentError(f"alpha must lie in (0, 1], got {alpha}")
    if not 0.0 < r < 1.0:
        raise InvalidArgumentError(f"split ratio must lie in (0, 1), got {r}")
    if k < 0:
        raise InvalidArgumentError(f"Layer count must be >= 0, got {k}")
    delta = 1.0 - alpha
    b0 = r * delta
    if k == 0:
        return b0, []
    return b0, [(1.0 - r) * delta / k] * k


@dataclass
class StageRecord:
    """Outcome of one calibration stage.

    Attributes:
        stage: "tau0" or the layer index as a string
        chosen: Selected threshold
        drop: Measured mean fidelity drop at the selected threshold
        budget: Cumulative budget of the stage
        drops: Measured drop per candidate
    """
    stage: str
    chosen: float
    drop: float
    budget: float
    drops: Dict[float, float] = field(default_factory=dict)


@dataclass
class CalibrationResult:
    thresholds: ThresholdVector
    stages: List[StageRecord]
    mean_fidelity: float
    mean_compute_ratio: float
    alpha: float
    split_ratio: float

    def provenance(self, seed: Optional[int] = None, sequence_ids: Sequence[str] = ()) -> Dict[str, object]:
        out: Dict[str, object] = {"alpha": self.alpha, "r": self.split_ratio}
        if seed is not None:
            out["seed"] = seed
        if sequence_ids:
            out["sequences"] = ",".join(sequence_ids)
        out["fidelity"] = f"{self.mean_fidelity:.6f}"
        return out


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else 1.0


class Calibrator:
    """Replays calibration sequences under candidate thresholds.

    Sequence order does not matter: scores are exact means over
    sequences. The first frame of every sequence (the dense seed) is
    left out.

    Example:
        >>> calibrator = Calibrator(net, [frames_a, frames_b], CalibrationConfig(alpha=0.97))
        >>> result = calibrator.calibrate()
        >>> result.thresholds.tau0
        0.01
    """

    def __init__(
        self,
        net: NetworkSpec,
        sequences: Sequence[Sequence[FeatureMap]],
        config: Optional[CalibrationConfig] = None,
        options: Optional[PipelineOptions] = None,
        bus: Optional[EventBus] = None,
    ) -> None:
        if not sequences or any(len(seq) == 0 for seq in sequences):
            raise InvalidArgumentError("Calibration needs at least one non-empty sequence")
        self.net = net
        self.sequences = [list(seq) for seq in sequences]
        self.config = config or CalibrationConfig()
        self.options = options or PipelineOptions()
        self.bus = bus or get_event_bus()
        self._dense = [[dense_forward(net, frame)[-1] for frame in seq] for seq in self.sequences]

    def replay(self, thresholds: ThresholdVector) -> Tuple[float, float]:
        """Mean fidelity and mean compute ratio over all sequences."""
        fidelities: List[float] = []
        ratios: List[float] = []
        for frames, dense in zip(self.sequences, self._dense):
            proc = StreamProcessor(
                self.net,
                thresholds,
                self.options,
                block_size=self.config.block_size,
                search_radius=self.config.search_radius,
                name="calibration",
            )
            scores, seq_ratios = [], []
            for index, (frame, reference) in enumerate(zip(frames, dense)):
                output, stats = proc.process(frame)
                if index == 0:
                    continue
                scores.append(fidelity(output, reference))
                seq_ratios.append(stats.compute_ratio)
            fidelities.append(_mean(scores))
            ratios.append(_mean(seq_ratios))
        return _mean(sorted(fidelities)), _mean(sorted(ratios))

    def _evaluate(self, base: ThresholdVector, stage: Optional[int], candidates: List[float]) -> List[float]:
        trial = [base.with_stage(stage, value) for value in candidates]
        if self.config.workers > 1 and len(trial) > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                scores = list(pool.map(lambda t: self.replay(t)[0], trial))
        else:
            scores = [self.replay(t)[0] for t in trial]
        return [1.0 - score for score in scores]

    def calibrate(self) -> CalibrationResult:
        """Greedy stage-by-stage selection.

        Raises:
            CalibrationInfeasibleError: If no candidate of a stage fits its budget
        """
        profiled = self.net.profiled_layers
        b0, layer_budgets = budget_split(self.config.alpha, len(profiled), self.config.split_ratio)
        stages: List[Optional[int]] = [None] + list(profiled)
        budgets = [b0] + layer_budgets

        current = ThresholdVector.zeros(profiled)
        cumulative = 0.0
        records: List[StageRecord] = []
        for position, (stage, budget) in enumerate(zip(stages, budgets)):
            cumulative += budget
            candidates = self.config.candidates_for(position)
            drops = self._evaluate(current, stage, candidates)
            feasible = [
                (value, drop) for value, drop in zip(candidates, drops)
                if drop <= cumulative + self.config.tolerance
            ]
            name = DISPATCH_STAGE if stage is None else str(stage)
            if not feasible:
                raise CalibrationInfeasibleError(
                    f"Stage {name}: no candidate within budget {cumulative:.6g} "
                    f"(smallest drop {min(drops):.6g})"
                )
            chosen, drop = max(feasible, key=lambda item: item[0])
            current = current.with_stage(stage, chosen)
            records.append(StageRecord(name, chosen, drop, cumulative, dict(zip(candidates, drops))))
            logger.info(f"Calibration stage {name}: chose {chosen} (drop {drop:.6f}, budget {cumulative:.6f})")
            self.bus.publish(CalibrationStageEvent(name, chosen, drop, cumulative))

        mean_fidelity, mean_ratio = self.replay(current)
        return CalibrationResult(
            thresholds=current,
            stages=records,
            mean_fidelity=mean_fidelity,
            mean_compute_ratio=mean_ratio,
            alpha=self.config.alpha,
            split_ratio=self.config.split_ratio,
        )


def calibrate(
    net: NetworkSpec,
    sequences: Sequence[Sequence[FeatureMap]],
    config: Optional[CalibrationConfig] = None,
    options: Optional[PipelineOptions] = None,
) -> ThresholdVector:
    """Calibrated thresholds for net on the given sequences."""
    return Calibrator(net, sequences, config, options).calibrate().thresholds


def write_calibration(
    path: Union[str, Path],
    result: CalibrationResult,
    seed: Optional[int] = None,
    sequence_ids: Sequence[str] = (),
) -> None:
    write_thresholds(path, result.thresholds, result.provenance(seed, sequence_ids))


def read_calibration(path: Union[str, Path]) -> Tuple[ThresholdVector, Dict[str, str]]:
    return parse_thresholds(Path(path).read_text(encoding="utf-8"))
