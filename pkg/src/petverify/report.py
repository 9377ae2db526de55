"""Presentation layer for metric reports: text table, CSV and figures.

The table prints with a fixed column order (name, roc_auc, eer, top-k
ascending, pair and query counts) so downstream diffs are stable. CSV uses
full-precision floats; figures are bar charts over the same numbers, written
as PNG next to the CSV.
"""

from __future__ import annotations

import csv
import io
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .core import InvalidConfigError, MetricReport
from .store import format_float, write_bytes_atomic, write_text_atomic

Entry = tuple[str, MetricReport]


def _all_ks(entries: Sequence[Entry]) -> list[int]:
    ks: set[int] = set()
    for _, report in entries:
        ks.update(report.top_k)
    return sorted(ks)


def _columns(entries: Sequence[Entry]) -> list[str]:
    return (
        ["name", "roc_auc", "eer"]
        + [f"top_{k}" for k in _all_ks(entries)]
        + ["n_pos", "n_neg", "n_queries"]
    )


def _row(name: str, report: MetricReport, ks: Sequence[int], fmt: str) -> list[str]:
    cells = [name, format(report.roc_auc, fmt), format(report.eer, fmt)]
    for k in ks:
        cells.append(format(report.top_k[k], fmt) if k in report.top_k else "-")
    cells.extend([str(report.n_pos), str(report.n_neg), str(report.n_queries)])
    return cells


def render_table(entries: Sequence[Entry]) -> str:
    """Fixed-column plain-text table, one row per report."""
    if not entries:
        raise InvalidConfigError("no reports to render")
    ks = _all_ks(entries)
    header = _columns(entries)
    rows = [_row(name, report, ks, ".4f") for name, report in entries]
    widths = [
        max(len(header[i]), *(len(row[i]) for row in rows)) for i in range(len(header))
    ]
    lines = []
    for cells in [header] + rows:
        padded = [cells[0].ljust(widths[0])] + [
            cells[i].rjust(widths[i]) for i in range(1, len(cells))
        ]
        lines.append("  ".join(padded).rstrip())
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_csv(entries: Sequence[Entry], path: str | os.PathLike[str]) -> None:
    """Same rows as the table, full-precision floats, plus provenance."""
    if not entries:
        raise InvalidConfigError("no reports to render")
    ks = _all_ks(entries)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(_columns(entries) + ["seed", "config_digest"])
    for name, report in entries:
        cells = [name, format_float(report.roc_auc), format_float(report.eer)]
        for k in ks:
            cells.append(format_float(report.top_k[k]) if k in report.top_k else "")
        cells.extend(
            [
                str(report.n_pos),
                str(report.n_neg),
                str(report.n_queries),
                str(report.seed),
                report.config_digest,
            ]
        )
        writer.writerow(cells)
    write_text_atomic(path, buffer.getvalue())


def _save_figure(fig: plt.Figure, path: Path) -> None:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="png", dpi=150, bbox_inches="tight")
    plt.close(fig)
    write_bytes_atomic(path, buffer.getvalue())


def render_figures(
    entries: Sequence[Entry], out_dir: str | os.PathLike[str]
) -> list[Path]:
    """Write verification and retrieval bar charts; returns the paths."""
    if not entries:
        raise InvalidConfigError("no reports to render")
    out = Path(out_dir)
    names = [name for name, _ in entries]
    positions = range(len(names))

    fig, axes = plt.subplots(1, 2, figsize=(max(6.4, 1.6 * len(names) + 3), 3.6))
    for axis, values, title in (
        (axes[0], [r.roc_auc for _, r in entries], "ROC AUC"),
        (axes[1], [1.0 - r.eer for _, r in entries], "1 - EER"),
    ):
        axis.bar(positions, values, color="#4878a8")
        axis.set_xticks(positions)
        axis.set_xticklabels(names, rotation=20, ha="right")
        axis.set_ylim(0.0, 1.05)
        axis.set_title(title)
        axis.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    verification_path = out / "verification_metrics.png"
    _save_figure(fig, verification_path)

    ks = _all_ks(entries)
    fig, axis = plt.subplots(figsize=(max(6.4, 1.6 * len(names) + 3), 3.6))
    width = 0.8 / max(1, len(ks))
    for slot, k in enumerate(ks):
        values = [r.top_k.get(k, 0.0) for _, r in entries]
        offsets = [p + (slot - (len(ks) - 1) / 2) * width for p in positions]
        axis.bar(offsets, values, width=width, label=f"top-{k}")
    axis.set_xticks(positions)
    axis.set_xticklabels(names, rotation=20, ha="right")
    axis.set_ylim(0.0, 1.05)
    axis.set_title("Retrieval accuracy")
    axis.grid(axis="y", alpha=0.3)
    axis.legend()
    fig.tight_layout()
    retrieval_path = out / "retrieval_topk.png"
    _save_figure(fig, retrieval_path)

    return [verification_path, retrieval_path]
