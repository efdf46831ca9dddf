"""Report emission as aligned text or comma-delimited rows.

Columns, in order:

* ``directive``: the directive label (``baseline`` for the uninstrumented run)
* ``scopes``: transaction scope used per launch after any promotion, ``-`` without one
* ``cycles``: simulated cycles of the failure-free run
* ``baseline_cycles``: cycles of the uninstrumented run on the same machine
* ``norm_time``: ``cycles / baseline_cycles``
* ``nvm_line_writes``: line writes that reached memory (host flag writes excluded)
* ``sp_wt_writes``: line writes of the SP_wt run, the write-count reference
* ``norm_writes``: ``nvm_line_writes / sp_wt_writes``
* ``log_bytes``: undo-log bytes made durable
* ``sweep_points``: crash points checked (0 when no sweep ran)
* ``sweep_pass_rate``: fraction of crash points recovered, ``-`` when no sweep ran
* ``notes``: compiler diagnostics such as scope promotions
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

from gpupm.driver.experiment import Report, ReportRow

COLUMNS = ("directive", "scopes", "cycles", "baseline_cycles", "norm_time", "nvm_line_writes",
           "sp_wt_writes", "norm_writes", "log_bytes", "sweep_points", "sweep_pass_rate", "notes")
FORMATS = ("table-text", "delimited")


def _cells(r: ReportRow, digits: int) -> list[str]:
    rate = "-" if r.sweep_pass_rate is None else f"{r.sweep_pass_rate:.4f}"
    return [r.directive, r.scopes, str(r.cycles), str(r.baseline_cycles),
            f"{r.norm_time:.{digits}f}", str(r.nvm_line_writes), str(r.sp_wt_writes),
            f"{r.norm_writes:.{digits}f}", str(r.log_bytes), str(r.sweep_points), rate, r.notes]


def format_delimited(report: Report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in report.rows:
        w.writerow(_cells(r, 9))
    return buf.getvalue()


def format_table(report: Report) -> str:
    rows = [list(COLUMNS)] + [_cells(r, 3) for r in report.rows]
    widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
    lines = []
    for row in rows:
        cells = [c.ljust(widths[i]) if i in (0, 1, len(COLUMNS) - 1) else c.rjust(widths[i])
                 for i, c in enumerate(row)]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def format_report(report: Report, fmt: str) -> str:
    if fmt == "table-text":
        return format_table(report)
    if fmt == "delimited":
        return format_delimited(report)
    raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def emit_report(report: Report, fmt: str, out_dir: str | Path | None = None) -> str:
    """Render ``report``; with ``out_dir`` also write ``report.txt`` or ``report.csv``."""
    text = format_report(report, fmt)
    if out_dir is not None:
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        (root / ("report.txt" if fmt == "table-text" else "report.csv")).write_text(text)
    return text
