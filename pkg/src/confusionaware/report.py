"""Delimited metric output and matplotlib figure rendering.

CSV is the canonical metric format; histograms are additionally rendered
to SVG so downstream checks can assert on text content. Numbers are
written with repr so identical runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import warnings

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .confusion import ConfusionMatrix, ConfusionStats
from .exceptions import FileFormatError
from .pipeline import EPOCH_CSV_COLUMNS, EpochReport


def _fmt(x) -> str:
    return repr(float(x))


def write_confusion_csv(matrix: np.ndarray, class_ids, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id"] + [str(int(c)) for c in class_ids])
        for i, c in enumerate(class_ids):
            writer.writerow([str(int(c))] + [_fmt(v) for v in matrix[i]])


def write_stats_csv(stats: ConfusionStats, path):
    count = sum(c for _, _, c in stats.histogram)
    with open(path, "w", newline="") as fh:
        fh.write("# variance uses the population convention (divide by count)\n")
        writer = csv.writer(fh)
        writer.writerow(["statistic", "value"])
        writer.writerow(["mean", _fmt(stats.mean)])
        writer.writerow(["variance", _fmt(stats.variance)])
        writer.writerow(["count", str(count)])


def read_stats_csv(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0] != ["statistic", "value"]:
        raise FileFormatError(f"{path}: expected a statistic,value header")
    for key, value in rows[1:]:
        out[key] = float(value)
    for key in ("mean", "variance"):
        if key not in out:
            raise FileFormatError(f"{path}: missing {key} row")
    return out


def write_histogram_csv(histogram, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lower", "bin_upper", "count"])
        for lo, hi, count in histogram:
            writer.writerow([_fmt(lo), _fmt(hi), str(int(count))])


def read_histogram_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["bin_lower", "bin_upper", "count"]:
        raise FileFormatError(f"{path}: expected a bin_lower,bin_upper,count header")
    return [(float(lo), float(hi), int(count)) for lo, hi, count in rows[1:]]


def rebin_histogram(histogram, edges):
    """Reassign counts onto the bin grid given by ``edges`` using bin
    centers; used to compare histograms built on different grids."""
    counts = np.zeros(len(edges) - 1, dtype=int)
    for lo, hi, count in histogram:
        center = (lo + hi) / 2.0
        j = int(np.clip(np.searchsorted(edges, center, side="right") - 1,
                        0, len(edges) - 2))
        counts[j] += count
    return [(float(edges[j]), float(edges[j + 1]), int(counts[j]))
            for j in range(len(edges) - 1)]


def _bar_params(histogram):
    lowers = np.array([lo for lo, _, _ in histogram])
    uppers = np.array([hi for _, hi, _ in histogram])
    counts = np.array([c for _, _, c in histogram])
    return lowers, uppers - lowers, counts


def render_histogram_svg(histogram, path, title="Inter-class confusion degree"):
    fig, ax = plt.subplots(figsize=(6, 4))
    lowers, widths, counts = _bar_params(histogram)
    ax.bar(lowers, counts, width=widths, align="edge", color="#4878cf",
           edgecolor="white")
    ax.set_xlabel("confusion degree")
    ax.set_ylabel("pair count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def render_comparison_svg(before, after, path,
                          labels=("before", "after")):
    """Overlaid histograms; mismatched grids are rebinned to the coarser
    one with a warning."""
    if [(lo, hi) for lo, hi, _ in before] != [(lo, hi) for lo, hi, _ in after]:
        coarse = before if len(before) <= len(after) else after
        edges = np.array([lo for lo, _, _ in coarse] + [coarse[-1][1]])
        warnings.warn("histogram grids differ; rebinning to the coarser grid")
        before = rebin_histogram(before, edges)
        after = rebin_histogram(after, edges)
    fig, ax = plt.subplots(figsize=(6, 4))
    for hist, label, color in zip((before, after), labels, ("#4878cf", "#d65f5f")):
        lowers, widths, counts = _bar_params(hist)
        ax.bar(lowers, counts, width=widths, align="edge", alpha=0.55,
               color=color, label=label)
    ax.set_xlabel("confusion degree")
    ax.set_ylabel("pair count")
    ax.set_title("Confusion degree distribution")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_epochs_csv(reports: list, path):
    """One row per epoch. Wall-clock time is deliberately omitted so that
    identical seeded runs produce byte-identical files."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPOCH_CSV_COLUMNS)
        for r in reports:
            writer.writerow([
                str(r.epoch), r.phase, _fmt(r.loss_total),
                _fmt(r.loss_classification), _fmt(r.loss_infonce),
                _fmt(r.loss_confusion), _fmt(r.confusion_mean),
                _fmt(r.confusion_variance), _fmt(r.churn),
                str(r.top_pair_raw[0]), str(r.top_pair_raw[1]),
                str(r.top_pair_weight[0]), str(r.top_pair_weight[1]),
            ])
