"""CSV and markdown renderings of campaign evaluations."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

from .evaluation import ReportRow
from .metrics import METRICS

_LABELS = {"ndcg": "NDCG", "hr": "HR", "mrr": "MRR"}


def write_csv(rows: Sequence[dict], path, columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt_cell(r.get(c)) for c in columns})
    return path


def _fmt_cell(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    return "" if v is None else v


def report_rows_csv(rows: Sequence[ReportRow], path) -> Path:
    columns = [f.name for f in fields(ReportRow)]
    return write_csv([asdict(r) for r in rows], path, columns)


def _rel(row: ReportRow) -> str:
    if row.rel_change is None or (isinstance(row.rel_change, float) and math.isnan(row.rel_change)):
        return "n/a"
    return f"{row.rel_change:+.2f}%{row.tier}"


def markdown_table(rows: Sequence[ReportRow], cutoffs: Sequence[int], title: str | None = None) -> str:
    """Methods as rows, metric@cutoff as columns.

    The original row holds absolute values; other rows hold the relative change with
    significance markers (* p<0.05, † p<0.01, ‡ p<0.001), then error and denoised shares.
    """
    cols = [(m, k) for m in METRICS for k in cutoffs]
    head = ["Method", "Users"] + [f"{_LABELS[m]}@{k}" for m, k in cols] + ["Format err %", "Halluc. %", "Denoised %"]
    lines = []
    if title:
        lines += [f"### {title}", ""]
    lines.append("| " + " | ".join(head) + " |")
    lines.append("|" + "|".join(["---"] + ["---:"] * (len(head) - 1)) + "|")
    by_method: dict[str, dict] = {}
    order = []
    for r in rows:
        if r.method not in by_method:
            by_method[r.method] = {}
            order.append(r.method)
        by_method[r.method][(r.metric, r.cutoff)] = r
    for method in order:
        cells = by_method[method]
        any_row = next(iter(cells.values()))
        if method == "original":
            vals = [f"{cells[c].mean:.4f}" if c in cells else "" for c in cols]
            tail = ["", "", ""]
        else:
            vals = [_rel(cells[c]) if c in cells else "" for c in cols]
            tail = [f"{any_row.formatting:.1f}", f"{any_row.hallucination:.1f}", f"{any_row.denoised:.1f}"]
        lines.append("| " + " | ".join([method, str(any_row.n_users)] + vals + tail) + " |")
    lines.append("")
    lines.append("Significance of paired t-tests against the original profiles: * p<0.05, † p<0.01, ‡ p<0.001.")
    return "\n".join(lines) + "\n"


def write_markdown(text: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
