"""Comparison reporting across runs.

Merges several evaluation reports (metrics.json files) into one table with
a row per run, written as CSV and rendered as a figure next to it, plus a
plain-text rendering for the terminal.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import FormatError

REPORT_COLUMNS = ("run", "Pre", "Sen", "Dice", "IoU", "HD(mm)", "ASSD(mm)")
_METRIC_KEYS = ("precision", "sensitivity", "dice", "iou", "hd_mm", "assd_mm")
_OVERLAP_COLUMNS = REPORT_COLUMNS[1:5]
_DISTANCE_COLUMNS = REPORT_COLUMNS[5:]


def load_report_means(path) -> dict:
    """Pull the per-metric means out of a metrics.json file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "means" not in doc:
        raise FormatError(f"{path}: not an evaluation report (no 'means' section)")
    means = doc["means"]
    missing = [k for k in _METRIC_KEYS if k not in means]
    if missing:
        raise FormatError(f"{path}: means section missing {missing}")
    return {k: means[k] for k in _METRIC_KEYS}


def comparison_rows(named_means: dict) -> list:
    """One row per run in insertion order: [run, precision, ..., assd]."""
    return [[name, *(means[k] for k in _METRIC_KEYS)] for name, means in named_means.items()]


def write_comparison_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([row[0]] + ["" if v is None else repr(v) for v in row[1:]])


def format_table(rows: list) -> str:
    """Aligned text table; undefined metrics render as a dash."""
    cells = [list(REPORT_COLUMNS)]
    for row in rows:
        cells.append([row[0]] + ["-" if v is None else f"{v:.4f}" for v in row[1:]])
    widths = [max(len(line[i]) for line in cells) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in cells]
    return "\n".join(lines)


def render_comparison_figure(rows: list, path) -> None:
    """Grouped bars: overlap ratios on one axis, mm distances on the other."""
    runs = [row[0] for row in rows]
    fig, (ax_overlap, ax_dist) = plt.subplots(1, 2, figsize=(11, 4))

    def _panel(ax, columns, offset, title, ylabel):
        width = 0.8 / max(len(runs), 1)
        for r, row in enumerate(rows):
            values = row[1 + offset : 1 + offset + len(columns)]
            positions = [i + r * width for i in range(len(columns))]
            heights = [0.0 if v is None else v for v in values]
            bars = ax.bar(positions, heights, width=width, label=runs[r])
            for bar, v in zip(bars, values):
                if v is None:
                    bar.set_hatch("//")
                    bar.set_alpha(0.25)
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(columns))])
        ax.set_xticklabels(columns)
        ax.set_title(title)
        ax.set_ylabel(ylabel)

    _panel(ax_overlap, _OVERLAP_COLUMNS, 0, "Overlap", "ratio")
    _panel(ax_dist, _DISTANCE_COLUMNS, 4, "Surface distance", "mm")
    ax_overlap.set_ylim(0, 1)
    ax_overlap.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
