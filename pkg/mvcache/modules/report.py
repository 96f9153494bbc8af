"""Report module - aggregate metrics CSVs into summary tables."""

import csv
import io
import logging
import math
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

from mvcache.core.errors import UsageError
from mvcache.modules.metrics import format_value, read_metrics

logger = logging.getLogger(__name__)

REPORT_COLUMNS = [
    "run",
    "mode",
    "frames",
    "reuse",
    "compute_ratio",
    "tx_ratio",
    "cloud_pct",
    "T_realized_ms",
    "fidelity",
]


def _mean(values: List[float]):
    return math.fsum(values) / len(values) if values else None


def _floats(rows: List[Dict[str, str]], column: str) -> List[float]:
    return [float(r[column]) for r in rows if r.get(column) not in (None, "")]


def aggregate(paths: Sequence[Union[str, Path]]) -> List[Dict[str, object]]:
    """One summary row per (run, mode); the first frame of each run is left out.

    The run label is the CSV file stem.

    Raises:
        UsageError: If no files are given or a file has no frames
    """
    if not paths:
        raise UsageError("report needs at least one metrics CSV")
    groups: "OrderedDict[Tuple[str, str], List[Dict[str, str]]]" = OrderedDict()
    for path in paths:
        rows = read_metrics(path)
        if not rows:
            raise UsageError(f"{path} holds no frame rows")
        for row in rows:
            if int(row["frame"]) == 0:
                continue
            groups.setdefault((Path(path).stem, row["mode"]), []).append(row)

    table = []
    for (run, mode), rows in groups.items():
        cloud = sum(1 for r in rows if r["endpoint"] == "cloud")
        table.append({
            "run": run,
            "mode": mode,
            "frames": len(rows),
            "reuse": _mean(_floats(rows, "reuse")),
            "compute_ratio": _mean(_floats(rows, "compute_ratio")),
            "tx_ratio": _mean(_floats(rows, "tx_ratio")),
            "cloud_pct": 100.0 * cloud / len(rows),
            "T_realized_ms": _mean(_floats(rows, "T_realized_ms")),
            "fidelity": _mean(_floats(rows, "fidelity")),
        })
    logger.info(f"Aggregated {len(paths)} runs into {len(table)} rows")
    return table


def render_report(table: List[Dict[str, object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in table:
        writer.writerow([format_value(row.get(c)) for c in REPORT_COLUMNS])
    return buffer.getvalue()


def report(paths: Sequence[Union[str, Path]]) -> str:
    return render_report(aggregate(paths))
