"""Per-iteration metrics rows and their CSV form.

Schema (one row per iteration, header always present):

    iteration,wall_ms,push_bytes,bcast_bytes,header_bytes,chunks_completed,max_core_load,min_core_load,loss

Byte columns are exact counters. Optional columns are written blank, not
as a ``nan`` literal: loss outside LOGREG runs, wall_ms in deterministic
single-thread runs, core loads in worker-side rows. Floats are written
with 9 significant digits and canonicalized at record time so that
parse(emit(report)) round-trips exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

from .errors import HarnessError

CSV_COLUMNS = [
    "iteration",
    "wall_ms",
    "push_bytes",
    "bcast_bytes",
    "header_bytes",
    "chunks_completed",
    "max_core_load",
    "min_core_load",
    "loss",
]


def canonical_float(value: float) -> float:
    """Quantize to the 9-significant-digit grid the CSV writer uses."""
    return float(f"{float(value):.9g}")


@dataclass
class IterationRow:
    iteration: int
    wall_ms: Optional[float] = None
    push_bytes: int = 0
    bcast_bytes: int = 0
    header_bytes: int = 0
    chunks_completed: int = 0
    max_core_load: Optional[int] = None
    min_core_load: Optional[int] = None
    loss: Optional[float] = None

    def __post_init__(self):
        if self.wall_ms is not None:
            self.wall_ms = canonical_float(self.wall_ms)
        if self.loss is not None:
            self.loss = canonical_float(self.loss)


@dataclass
class MetricsReport:
    rows: list[IterationRow] = field(default_factory=list)

    def row_for(self, iteration: int) -> IterationRow:
        for row in self.rows:
            if row.iteration == iteration:
                return row
        raise HarnessError(f"no metrics row for iteration {iteration}")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def emit_csv(report: MetricsReport, path) -> None:
    """Write the report; UTF-8, LF line endings, header row always first."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in report.rows:
                writer.writerow(
                    [
                        row.iteration,
                        _fmt(row.wall_ms),
                        row.push_bytes,
                        row.bcast_bytes,
                        row.header_bytes,
                        row.chunks_completed,
                        _fmt(row.max_core_load),
                        _fmt(row.min_core_load),
                        _fmt(row.loss),
                    ]
                )
    except OSError as exc:
        raise HarnessError(f"cannot write metrics to {path}: {exc}") from None


def parse_csv(path) -> MetricsReport:
    """Inverse of emit_csv."""
    rows: list[IterationRow] = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != CSV_COLUMNS:
                raise HarnessError(f"unexpected metrics header in {path}: {header}")
            for rec in reader:
                if not rec:
                    continue
                rows.append(
                    IterationRow(
                        iteration=int(rec[0]),
                        wall_ms=float(rec[1]) if rec[1] else None,
                        push_bytes=int(rec[2]),
                        bcast_bytes=int(rec[3]),
                        header_bytes=int(rec[4]),
                        chunks_completed=int(rec[5]),
                        max_core_load=int(rec[6]) if rec[6] else None,
                        min_core_load=int(rec[7]) if rec[7] else None,
                        loss=float(rec[8]) if rec[8] else None,
                    )
                )
    except OSError as exc:
        raise HarnessError(f"cannot read metrics from {path}: {exc}") from None
    return MetricsReport(rows=rows)
