"""
Report Tables and Writers

What: Comparison rows (mean, variance, p99, L2 and their relative change
      against the first row) and JSON/CSV writers for every command output
How: pandas frames for tables; json with a fixed key order so reruns of a
     deterministic command write byte-identical files
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np
import pandas as pd

from src.metrics import relative_change, summarize

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["label", "mean_ns", "variance_ns2", "p99_ns", "l2_norm",
                 "mean_change_pct", "variance_change_pct", "p99_change_pct", "l2_change_pct"]


@dataclass(frozen=True)
class ReportRow:
    """
    One compared variant

    *_change_pct = (baseline - this) / baseline * 100, so reductions are
    positive.
    """

    label: str
    mean_ns: float
    variance_ns2: float
    p99_ns: float
    l2_norm: float
    mean_change_pct: float = 0.0
    variance_change_pct: float = 0.0
    p99_change_pct: float = 0.0
    l2_change_pct: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {c: getattr(self, c) for c in TABLE_COLUMNS}


def row_from_latencies(label: str, samples: Sequence[Sequence[float]]) -> ReportRow:
    """Average the per-run summaries of several runs (one latency vector per seed)."""
    summaries = [summarize(s) for s in samples]
    return ReportRow(
        label=label,
        mean_ns=float(np.mean([s.mean_ns for s in summaries])),
        variance_ns2=float(np.mean([s.variance_ns2 for s in summaries])),
        p99_ns=float(np.mean([s.p99_ns for s in summaries])),
        l2_norm=float(np.mean([s.lp_norm.value for s in summaries])),
    )


def with_changes(rows: List[ReportRow]) -> List[ReportRow]:
    """Fill the change columns of every row against rows[0]."""
    if not rows:
        return []
    base = rows[0]
    filled = []
    for row in rows:
        filled.append(ReportRow(
            row.label, row.mean_ns, row.variance_ns2, row.p99_ns, row.l2_norm,
            mean_change_pct=100.0 * relative_change(base.mean_ns, row.mean_ns),
            variance_change_pct=100.0 * relative_change(base.variance_ns2, row.variance_ns2),
            p99_change_pct=100.0 * relative_change(base.p99_ns, row.p99_ns),
            l2_change_pct=100.0 * relative_change(base.l2_norm, row.l2_norm),
        ))
    return filled


def comparison_frame(rows: List[ReportRow]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in with_changes(rows)], columns=TABLE_COLUMNS)


def _default(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(document: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2, default=_default)
        handle.write("\n")
    logger.info(f"Wrote {path}")
    return path


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {path} ({len(frame)} rows)")
    return path


def write_table(frame: pd.DataFrame, path: Union[str, Path], fmt: str = "csv") -> List[Path]:
    """
    Write a table as CSV, JSON records, or both

    Args:
        fmt: "csv", "json" or "both"; for "both" the suffix of path is swapped
    """
    path = Path(path)
    written = []
    if fmt in ("csv", "both"):
        written.append(write_csv(frame, path.with_suffix(".csv")))
    if fmt in ("json", "both"):
        written.append(write_json(frame.to_dict(orient="records"), path.with_suffix(".json")))
    if not written:
        raise ValueError(f"unknown table format {fmt!r}")
    return written


def format_table(frame: pd.DataFrame, columns: Iterable[str] = ()) -> str:
    """Plain-text rendering for the console."""
    selected = frame[list(columns)] if columns else frame
    return selected.to_string(index=False, float_format=lambda v: f"{v:,.2f}")
