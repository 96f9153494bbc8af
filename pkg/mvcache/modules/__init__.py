"""Modules - synthetic sequences, metrics recording and reports."""

from mvcache.modules.datagen import FrameSequence, SCENARIOS, datagen, generate_sequence, load_sequence
from mvcache.modules.metrics import COLUMNS, MetricsRecorder, write_metrics
from mvcache.modules.report import aggregate, report

__all__ = [
    "FrameSequence",
    "SCENARIOS",
    "datagen",
    "generate_sequence",
    "load_sequence",
    "COLUMNS",
    "MetricsRecorder",
    "write_metrics",
    "aggregate",
    "report",
]
