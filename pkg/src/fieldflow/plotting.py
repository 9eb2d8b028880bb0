"""Figures for the ``stats`` and ``eval`` reports (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MatchResult, pr_curve  # noqa: E402


def plot_size_histogram(stats: dict, path: str | Path) -> Path:
    """Log-log bar chart of field counts per area bin, floor marked."""
    edges = stats["edges_ha"]
    counts = stats["counts"]
    fig, ax = plt.subplots(figsize=(6, 4))
    lefts = edges[:-1]
    widths = [b - a for a, b in zip(edges[:-1], edges[1:])]
    ax.bar(lefts, [max(c, 0) for c in counts], width=widths, align="edge",
           edgecolor="black", color="#7fa36b")
    ax.set_xscale("log")
    if any(counts):
        ax.set_yscale("log")
    floor = stats.get("floor_ha")
    if floor:
        ax.axvline(floor, color="firebrick", linestyle="--", label=f"{floor:g} ha floor")
        ax.legend(loc="upper right")
    ax.set_xlabel("field area (ha)")
    ax.set_ylabel("number of fields")
    ax.set_title(f"{stats['total_fields']} fields, {stats['total_area_ha']:.1f} ha")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pr_curves(matches: Mapping[float, MatchResult], path: str | Path,
                   taus: tuple[float, ...] = (0.5, 0.75)) -> Path:
    """Precision-recall steps at a few IoU thresholds."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for tau in taus:
        m = matches.get(tau)
        if m is None or m.n_gt == 0:
            continue
        c = pr_curve(m)
        ax.step(c.recall, c.precision, where="post", label=f"IoU {tau:.2f}")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.legend(loc="lower left")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
