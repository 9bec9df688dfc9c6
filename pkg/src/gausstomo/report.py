"""Delimited metric reports and the static figures rendered from them.

Every figure is written next to the CSV that holds its exact numbers;
nothing is interactive.  PNG metadata is pinned so reruns do not differ
by embedded tool strings.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

METRIC_COLUMNS = ("case_id", "views", "method", "dsc_proj", "psnr_proj",
                  "dsc_vol", "ssim_vol", "angle_collision", "mask_dilation")
_FLOAT_COLS = ("dsc_proj", "psnr_proj", "dsc_vol", "ssim_vol")
_INT_COLS = ("views", "angle_collision", "mask_dilation")
_PNG_META = {"Software": "gausstomo"}


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            out = []
            for col in METRIC_COLUMNS:
                val = row[col]
                if col in _FLOAT_COLS:
                    out.append(repr(float(val)))
                elif col in _INT_COLS:
                    out.append(str(int(val)))
                else:
                    out.append(str(val))
            writer.writerow(out)


def read_metrics_csv(path):
    rows = []
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metric columns {header}")
        for rec in reader:
            row = dict(zip(METRIC_COLUMNS, rec))
            for col in _FLOAT_COLS:
                row[col] = float(row[col])
            for col in _INT_COLS:
                row[col] = int(row[col])
            rows.append(row)
    return rows


def _methods(rows):
    return sorted({r["method"] for r in rows})


def _mean(vals):
    vals = [v for v in vals if np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def plot_method_bars(rows, path):
    """Grouped bar chart: mean of each metric per method."""
    methods = _methods(rows)
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(_FLOAT_COLS))
    width = 0.8 / max(1, len(methods))
    for mi, method in enumerate(methods):
        means = [_mean([r[c] for r in rows if r["method"] == method])
                 for c in _FLOAT_COLS]
        ax.bar(x + mi * width, means, width, label=method)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(_FLOAT_COLS)
    ax.set_ylabel("mean over cases")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_view_sweep(rows, path, column="dsc_vol"):
    """Mean of one metric vs number of training views, one line per method."""
    methods = _methods(rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in methods:
        pts = {}
        for r in rows:
            if r["method"] == method:
                pts.setdefault(r["views"], []).append(r[column])
        views = sorted(pts)
        ax.plot(views, [_mean(pts[v]) for v in views], marker="o", label=method)
    ax.set_xlabel("training views")
    ax.set_ylabel(f"mean {column}")
    ax.set_xscale("log", base=2)
    ax.set_xticks(sorted({r["views"] for r in rows}))
    ax.get_xaxis().set_major_formatter(plt.ScalarFormatter())
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_traces(traces, path):
    """Overlayed total-loss curves; ``traces`` maps label -> trace array."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(traces):
        tr = traces[label]
        ax.plot(tr[:, 0], tr[:, 3], label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    if len(traces) <= 12:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def render_report(rows, out_dir, traces=None):
    """Write the combined CSV plus every figure it supports.

    Returns the list of file paths written.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    combined = os.path.join(out_dir, "combined.csv")
    write_metrics_csv(combined, rows)
    written.append(combined)
    if rows:
        bars = os.path.join(out_dir, "metric_bars.png")
        plot_method_bars(rows, bars)
        written.append(bars)
        if len({r["views"] for r in rows}) > 1:
            sweep = os.path.join(out_dir, "dsc_vs_views.png")
            plot_view_sweep(rows, sweep)
            written.append(sweep)
    if traces:
        curves = os.path.join(out_dir, "loss_curves.png")
        plot_loss_traces(traces, curves)
        written.append(curves)
    return written
