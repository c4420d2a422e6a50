"""Result rows, CSV persistence and plain-text tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from . import peft
from .errors import ReportError
from .tasks import METRIC_DIRECTION
from .train import RunResult, SweepTable

COLUMNS = ("method", "task", "seed", "fraction", "lr", "trainable_upstream", "trainable_total",
           "metric_name", "metric_value", "diverged")


def format_count(n: int) -> str:
    """Millions to two decimals; small counts are shown exactly (``12``, not ``0.00M``)."""
    return str(n) if n < 10_000 else f"{n / 1e6:.2f}M"


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.2f}±{std:.2f}"


def as_percent(x: float) -> float:
    return 100.0 * x


def result_row(r: RunResult) -> list[str]:
    return [r.method, r.task, str(r.seed), repr(float(r.fraction)), repr(float(r.lr)),
            str(r.trainable_upstream), str(r.trainable_total), r.metric_name, repr(float(r.metric)),
            "true" if r.diverged else "false"]


def rows_to_csv(rows: Iterable[Sequence[str]], header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(COLUMNS)
    writer.writerows(rows)
    return buf.getvalue()


def append_rows(path, rows: Sequence[Sequence[str]]) -> None:
    """Append whole lines; the header is written only when the file is new or empty."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    text = rows_to_csv(rows, header=new)
    with path.open("a", encoding="utf-8", newline="") as fh:
        fh.write(text)


def align(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def _column_label(axis: str, value: float) -> str:
    return f"lr={value:g}" if axis == "lr" else f"{value:g}"


def sweep_text(table: SweepTable, metric_name: str) -> str:
    """Methods as rows, the swept value as columns, ``mean±std`` of the metric in percent."""
    header = [f"{metric_name} (%)"] + [_column_label(table.axis, c) for c in table.columns]
    rows = [header]
    for m in table.methods:
        row = [peft.METHODS[m].label]
        for c in table.columns:
            cell = table.cell(m, c)
            row.append(format_cell(as_percent(cell.mean), as_percent(cell.std)))
        rows.append(row)
    return align(rows)


# -- reading rows back --------------------------------------------------------------------

@dataclass(frozen=True)
class Row:
    method: str
    task: str
    seed: int
    fraction: float
    lr: float
    trainable_upstream: int
    trainable_total: int
    metric_name: str
    metric_value: float
    diverged: bool


def _parse_row(fields: list[str], where: str) -> Row:
    if len(fields) != len(COLUMNS):
        raise ReportError(f"{where}: expected {len(COLUMNS)} fields, got {len(fields)}")
    method, task, seed, fraction, lr, up, total, metric_name, value, diverged = fields
    try:
        row = Row(method, task, int(seed), float(fraction), float(lr), int(up), int(total),
                  metric_name, float(value), {"true": True, "false": False}[diverged])
    except (ValueError, KeyError) as exc:
        raise ReportError(f"{where}: malformed field ({exc})") from None
    if metric_name not in METRIC_DIRECTION:
        raise ReportError(f"{where}: unknown metric {metric_name!r}")
    if not math.isfinite(row.metric_value):
        raise ReportError(f"{where}: non-finite metric value")
    return row


def read_rows(path) -> list[Row]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc.strerror}") from None
    lines = list(csv.reader(io.StringIO(text)))
    if not lines or tuple(lines[0]) != COLUMNS:
        raise ReportError(f"{path}:1: header must be {','.join(COLUMNS)}")
    rows = []
    for lineno, fields in enumerate(lines[1:], start=2):
        if fields:
            rows.append(_parse_row(fields, f"{path}:{lineno}"))
    return rows


def _method_order(name: str):
    order = list(peft.METHODS)
    return (order.index(name), name) if name in order else (len(order), name)


def summary_table(rows: Sequence[Row]) -> str:
    """
    Methods x tasks matrix of the metric mean over seeds (in percent). The best
    cell of each column is starred: highest accuracy, lowest error rate.
    """
    if not rows:
        raise ReportError("no result rows to report")
    seen = {}
    metric_of_task: dict[str, str] = {}
    for r in rows:
        key = (r.method, r.task, r.seed)
        if key in seen:
            raise ReportError(f"duplicate result for method={r.method} task={r.task} seed={r.seed}")
        seen[key] = r
        if metric_of_task.setdefault(r.task, r.metric_name) != r.metric_name:
            raise ReportError(f"task {r.task} reported with two metrics")
    methods = sorted({r.method for r in rows}, key=_method_order)
    tasks = sorted(metric_of_task)
    means: dict[tuple[str, str], float] = {}
    for m in methods:
        for t in tasks:
            values = sorted(r.metric_value for r in rows if r.method == m and r.task == t)
            if values:
                means[(m, t)] = math.fsum(values) / len(values)
    best = {}
    for t in tasks:
        cells = [means[(m, t)] for m in methods if (m, t) in means]
        best[t] = max(cells) if METRIC_DIRECTION[metric_of_task[t]] else min(cells)
    table = [["method"] + [f"{t} ({metric_of_task[t]} %)" for t in tasks]]
    for m in methods:
        label = peft.METHODS[m].label if m in peft.METHODS else m
        row = [label]
        for t in tasks:
            if (m, t) not in means:
                row.append("-")
                continue
            v = means[(m, t)]
            row.append(f"{as_percent(v):.2f}" + ("*" if v == best[t] else " "))
        table.append(row)
    return align(table) + "* best per column\n"
