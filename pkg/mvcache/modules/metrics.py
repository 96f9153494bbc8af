"""Metrics module - per-frame CSV rows.

MetricsRecorder subscribes to frame_processed events and writes one row
per frame plus a trailing mean row over every frame but the first
(the dense initialization frame). Floats are written with fixed
precision so repeated runs produce byte-identical files.
"""

import csv
import io
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from mvcache.core.events import FRAME_PROCESSED, Event, EventBus

logger = logging.getLogger(__name__)

COLUMNS = [
    "frame",
    "mode",
    "endpoint",
    "rho_e",
    "rho_c",
    "reuse",
    "compute_ratio",
    "tx_bytes",
    "T_est_ms",
    "T_realized_ms",
    "fidelity",
    "tx_ratio",
    "tx_ms",
    "infer_ms",
]
NUMERIC = [c for c in COLUMNS if c not in ("frame", "mode", "endpoint")]
MEAN_LABEL = "mean"


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return f"{value:.6f}"
    return str(value)


def mean_row(rows: List[Dict[str, Any]]) -> Dict[str, Any]:
    """Column means over rows with frame > 0; blank where no values exist."""
    body = [r for r in rows if isinstance(r.get("frame"), int) and r["frame"] > 0]
    out: Dict[str, Any] = {"frame": MEAN_LABEL, "mode": rows[0]["mode"] if rows else "", "endpoint": ""}
    for column in NUMERIC:
        values = [float(r[column]) for r in body if r.get(column) is not None]
        out[column] = math.fsum(values) / len(values) if values else None
    return out


def render_csv(rows: List[Dict[str, Any]], include_mean: bool = True) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        writer.writerow([format_value(row.get(c)) for c in COLUMNS])
    if include_mean and rows:
        summary = mean_row(rows)
        writer.writerow([format_value(summary.get(c)) for c in COLUMNS])
    return buffer.getvalue()


def write_metrics(path: Union[str, Path], rows: List[Dict[str, Any]], include_mean: bool = True) -> None:
    Path(path).write_text(render_csv(rows, include_mean), encoding="utf-8")
    logger.info(f"Wrote {len(rows)} metric rows to {path}")


def read_metrics(path: Union[str, Path]) -> List[Dict[str, str]]:
    """Raw string rows of a metrics CSV, the mean row excluded."""
    with open(path, newline="", encoding="utf-8") as f:
        return [row for row in csv.DictReader(f) if row.get("frame") != MEAN_LABEL]


class MetricsRecorder:
    """Collects frame_processed rows from an event bus.

    Example:
        >>> recorder = MetricsRecorder(bus)
        >>> await driver.run(frames)
        >>> recorder.write("run.csv")
    """

    def __init__(self, bus: Optional[EventBus] = None) -> None:
        self.rows: List[Dict[str, Any]] = []
        self.bus = bus
        if bus is not None:
            bus.subscribe(FRAME_PROCESSED, self.on_frame)

    def on_frame(self, event: Event) -> None:
        self.rows.append(dict(event.data["row"]))

    def detach(self) -> None:
        if self.bus is not None:
            self.bus.unsubscribe(FRAME_PROCESSED, self.on_frame)
            self.bus = None

    def summary(self) -> Dict[str, Any]:
        return mean_row(self.rows)

    def render(self) -> str:
        return render_csv(self.rows)

    def write(self, path: Union[str, Path]) -> None:
        write_metrics(path, self.rows)
