"""Human-readable units and the stable CSV schema for sweeps."""

from __future__ import annotations

import csv
import io
from typing import Iterable, Sequence

from .memory import MemoryBreakdown

MB = 10**6
MIB = 2**20
GB = 10**9
GIB = 2**30


def human_bytes(n: int) -> str:
    """Decimal and binary renderings, e.g. ``57.86 MB / 55.18 MiB``."""
    if abs(n) >= GB:
        return f"{n / GB:.2f} GB / {n / GIB:.2f} GiB"
    if abs(n) >= MB:
        return f"{n / MB:.2f} MB / {n / MIB:.2f} MiB"
    return f"{n} B"


def breakdown_report(bd: MemoryBreakdown) -> dict:
    return {k: {"bytes": v, "human": human_bytes(v)} for k, v in bd.as_dict().items()}


SWEEP_COLUMNS = (
    "heads", "nodes", "leaves", "label", "query_count", "batch", "precision",
    "feasible", "reason", "buffer_bytes", "buffer_mb", "buffer_mib",
    "chat_buffer_mb", "chat_buffer_mib", "total_bytes", "mean_tau",
    "per_token_latency_ms", "throughput_tok_s",
)


def write_csv(rows: Iterable[dict], columns: Sequence[str] = SWEEP_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: _cell(row.get(c)) for c in columns})
    return buf.getvalue()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)
