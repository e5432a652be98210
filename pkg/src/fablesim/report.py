"""Report rendering: delimited summaries with matplotlib figures beside them.

Both report paths (evaluation win rates, extraction stats) write a CSV and a
PNG into the same directory, so results are equally easy to read by machine
and at a glance.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # render to files, never to a display
import matplotlib.pyplot as plt

from .evaluation import WinRateReport
from .extraction import ExtractionStats
from .world import WorldviewSetting

logger = logging.getLogger(__name__)

FIGURE_DPI = 150


def write_win_rate_report(report: WinRateReport, out_dir: str | Path) -> tuple[Path, Path]:
    """win_rates.csv plus a paired-bar figure per metric; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "win_rates.csv"
    fig_path = out_dir / "win_rates.png"

    fields = ["metric", "wins_a", "wins_b", "valid", "invalid", "win_rate_a", "win_rate_b"]
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for metric, entry in report.metrics.items():
            writer.writerow({"metric": metric, **{k: entry.get(k, "") for k in fields[1:]}})
        writer.writerow({"metric": "overall", **{k: report.overall.get(k, "") for k in fields[1:]}})

    metrics = [m for m, entry in report.metrics.items() if "win_rate_a" in entry]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(metrics) + 1.5), 3.5))
    if metrics:
        xs = range(len(metrics))
        rates_a = [report.metrics[m]["win_rate_a"] for m in metrics]
        rates_b = [report.metrics[m]["win_rate_b"] for m in metrics]
        width = 0.38
        ax.bar([x - width / 2 for x in xs], rates_a, width, label="story A", color="#4878a8")
        ax.bar([x + width / 2 for x in xs], rates_b, width, label="story B", color="#c47a54")
        ax.axhline(50, color="grey", linewidth=0.8, linestyle="--")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(metrics)
        ax.set_ylim(0, 100)
        ax.set_ylabel("win rate (%)")
        ax.legend()
    else:
        ax.text(0.5, 0.5, "no valid pairs", ha="center", va="center")
        ax.set_axis_off()
    ax.set_title("Pairwise win rates")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=FIGURE_DPI)
    plt.close(fig)
    return csv_path, fig_path


def write_extraction_report(
    stats: ExtractionStats,
    settings: list[WorldviewSetting],
    out_dir: str | Path,
) -> tuple[Path, Path]:
    """extraction_stats.csv plus a settings-by-nature figure; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "extraction_stats.csv"
    fig_path = out_dir / "extraction_stats.png"

    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["book", "settings", "chapters", "words"])
        writer.writeheader()
        writer.writerow(stats.to_dict())

    natures = Counter((s.nature or "unlabeled") for s in settings)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(natures) + 2.0), 3.5))
    if natures:
        labels = sorted(natures)
        ax.bar(labels, [natures[label] for label in labels], color="#5a8a6a")
        ax.set_ylabel("settings")
        ax.tick_params(axis="x", rotation=30)
    else:
        ax.text(0.5, 0.5, "no settings", ha="center", va="center")
        ax.set_axis_off()
    ax.set_title(f"Worldview settings by nature ({stats.book})")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=FIGURE_DPI)
    plt.close(fig)
    return csv_path, fig_path
