"""Figure and file output for runs and comparisons.

Everything renders through the Agg backend straight to disk; nothing here
opens a window. Each helper writes one file and returns its path so
callers can print a manifest of what was produced.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .sampling import SCHEDULE_KINDS, AlphaSchedule, alpha_at

ACC_KEYS = ("mean_acc", "t10_acc", "b10_acc")
ACC_LABELS = {"mean_acc": "mean", "t10_acc": "top 10%", "b10_acc": "bottom 10%"}


def read_metrics(path: str):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def save_training_curves(metrics, out_path: str, title: str = "") -> str:
    """Loss and accuracy aggregates against iteration, two stacked panels.

    Rows written after divergence carry None accuracies; those are drawn
    on the loss panel only, so a truncated run still renders.
    """
    fig, (ax_loss, ax_acc) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    its = [r["iteration"] for r in metrics]
    losses = [r["loss"] for r in metrics if r["loss"] is not None]
    ax_loss.plot(its[: len(losses)], losses, marker="o", ms=3)
    ax_loss.set_ylabel("training loss")
    ax_loss.grid(alpha=0.3)
    if title:
        ax_loss.set_title(title)

    scored = [r for r in metrics if r.get("mean_acc") is not None]
    for key in ACC_KEYS:
        ax_acc.plot(
            [r["iteration"] for r in scored],
            [r[key] for r in scored],
            marker="o", ms=3, label=ACC_LABELS[key],
        )
    ax_acc.set_xlabel("iteration")
    ax_acc.set_ylabel("test accuracy")
    ax_acc.set_ylim(0, 1)
    ax_acc.grid(alpha=0.3)
    ax_acc.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def save_schedule_curves(out_path: str, schedules=None, points: int = 200) -> str:
    """Alpha against training progress for each schedule shape."""
    if schedules is None:
        schedules = {kind: AlphaSchedule(kind=kind) for kind in SCHEDULE_KINDS
                     if kind != "constant"}
        schedules["constant 1.0"] = AlphaSchedule(kind="constant", alpha_start=1.0)
    grid = np.linspace(0.0, 1.0, points)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, sched in schedules.items():
        ax.plot(grid, [alpha_at(sched, p) for p in grid], label=label)
    ax.set_xlabel("training progress")
    ax.set_ylabel("alpha")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def save_comparison_chart(comparison, out_path: str) -> str:
    """Grouped bars: one cluster per aggregate, one bar per run."""
    rows = comparison.rows
    x = np.arange(len(ACC_KEYS))
    width = 0.8 / max(1, len(rows))
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, row in enumerate(rows):
        vals = [row.mean_acc, row.t10_acc, row.b10_acc]
        ax.bar(x + (i - (len(rows) - 1) / 2) * width, vals, width, label=row.label)
    ax.set_xticks(x)
    ax.set_xticklabels([ACC_LABELS[k] for k in ACC_KEYS])
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    ax.set_title(f"{len(comparison.task_names)} common tasks")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def save_size_histogram(dataset, out_path: str, bins: int = 20) -> str:
    """Train-split sizes on a log axis; long tails are the expected shape."""
    sizes = dataset.train_sizes()
    lo, hi = max(1, sizes.min()), max(2, sizes.max())
    edges = np.geomspace(lo, hi + 1, bins)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(sizes, bins=edges, edgecolor="black", alpha=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("train examples per task")
    ax.set_ylabel("tasks")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def write_comparison_files(comparison, out_dir: str, stem: str = "comparison"):
    """CSV plus chart; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(csv_path, "w") as f:
        f.write(comparison.to_csv())
    png_path = save_comparison_chart(comparison, os.path.join(out_dir, f"{stem}.png"))
    return [csv_path, png_path]


def render_run_dir(run_dir: str):
    """Figures for one finished training run directory.

    Reads metrics.jsonl and writes curves.png next to it. Returns the
    written paths (empty when there is nothing to plot).
    """
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(metrics_path):
        return []
    metrics = read_metrics(metrics_path)
    if not metrics:
        return []
    out = save_training_curves(
        metrics, os.path.join(run_dir, "curves.png"),
        title=os.path.basename(os.path.normpath(run_dir)),
    )
    return [out]
