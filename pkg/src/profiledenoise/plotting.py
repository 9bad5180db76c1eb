"""Matplotlib figures for the report: method bars and the rating / profile-length breakdowns."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import ReportRow  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}
POS, NEG, NEUTRAL = "#3b7d3b", "#b03a2e", "#8c8c8c"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _nan(v):
    return math.nan if v is None else v


def method_bars(rows: Sequence[ReportRow], metric: str, cutoff: int, path, title: str | None = None) -> Path:
    """Relative change per method for one metric@cutoff; hatched bars are not significant."""
    sel = [r for r in rows if r.method != "original" and r.metric == metric and r.cutoff == cutoff]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 0.6 * len(sel) + 1.5), 3.2))
        vals = np.array([_nan(r.rel_change) for r in sel], dtype=float)
        x = np.arange(len(sel))
        colors = [POS if v >= 0 else NEG for v in np.nan_to_num(vals)]
        bars = ax.bar(x, np.nan_to_num(vals), color=colors)
        for b, r in zip(bars, sel):
            if not r.tier:
                b.set_hatch("//")
                b.set_alpha(0.6)
            else:
                ax.annotate(r.tier, (b.get_x() + b.get_width() / 2, b.get_height()),
                            ha="center", va="bottom" if b.get_height() >= 0 else "top")
        ax.axhline(0, color="k", lw=0.8)
        ax.set_xticks(x, [r.method for r in sel], rotation=40, ha="right")
        ax.set_ylabel(f"{metric.upper()}@{cutoff} change (%)")
        ax.set_title(title or f"Relative change over original ({sel[0].subset if sel else 'all'} users)")
        return _save(fig, path)


def rating_breakdown(tables: dict[str, list[dict]], path, cutoff: int = 20) -> Path:
    """Positive and negative parts of the NDCG change, grouped by removed-item rating."""
    methods = [m for m, t in tables.items() if t]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(1, len(methods)), figsize=(3.0 * max(1, len(methods)), 3.0),
                                 sharey=True, squeeze=False)
        for ax, m in zip(axes[0], methods):
            t = tables[m]
            x = np.array([r["rating"] for r in t])
            ax.bar(x, [r["positive_pct"] for r in t], color=POS, label="positive")
            ax.bar(x, [r["negative_pct"] for r in t], color=NEG, label="negative")
            ax.scatter(x, [r["relative_pct"] for r in t], color="k", s=12, zorder=3, label="net")
            ax.axhline(0, color="k", lw=0.8)
            ax.set_xticks(x)
            ax.set_xlabel("rating of removed item")
            ax.set_title(m)
        axes[0][0].set_ylabel(f"NDCG@{cutoff} change (%)")
        if methods:
            axes[0][0].legend(loc="best")
        else:
            axes[0][0].text(0.5, 0.5, "no accepted removals", ha="center", va="center",
                            transform=axes[0][0].transAxes)
        return _save(fig, path)


def length_breakdown(tables: dict[str, list[dict]], path, cutoff: int = 20) -> Path:
    """Per profile-length quartile: relative NDCG change (top) and validation-rank outcome counts (bottom)."""
    methods = list(tables)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, max(1, len(methods)), figsize=(3.0 * max(1, len(methods)), 4.6),
                                 squeeze=False, sharex="col")
        for col, m in enumerate(methods):
            t = tables[m]
            x = np.arange(len(t))
            labels = [f"{r['min_length']}-{r['max_length']}" for r in t]
            rel = np.array([r["relative_pct"] for r in t], dtype=float)
            top, bot = axes[0][col], axes[1][col]
            top.bar(x, np.nan_to_num(rel), color=[POS if v >= 0 else NEG for v in np.nan_to_num(rel)])
            top.axhline(0, color="k", lw=0.8)
            top.set_title(m)
            imp = np.array([r["improved"] for r in t])
            unc = np.array([r["unchanged"] for r in t])
            wor = np.array([r["worsened"] for r in t])
            bot.bar(x, imp, color=POS, label="improved")
            bot.bar(x, unc, bottom=imp, color=NEUTRAL, label="unchanged")
            bot.bar(x, wor, bottom=imp + unc, color=NEG, label="worsened")
            bot.set_xticks(x, labels)
            bot.set_xlabel("training profile length")
        axes[0][0].set_ylabel(f"NDCG@{cutoff} change (%)")
        axes[1][0].set_ylabel("users")
        axes[1][0].legend(loc="best")
        return _save(fig, path)
