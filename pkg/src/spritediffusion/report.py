"""Comparison reports across runs: a delimited metrics table plus one bar
chart per shared metric, rendered to image files."""

from __future__ import annotations

import csv
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluation import MetricsReport

TABLE_METRICS = (
    "frame_consistency",
    "depth_error",
    "sketch_error",
    "epe",
    "frechet_distance",
    "caption_accuracy",
)


def load_reports(paths: Sequence[str], labels: Sequence[str] | None = None):
    out = []
    for i, path in enumerate(paths):
        rep, label = MetricsReport.load(path)
        if labels and i < len(labels) and labels[i]:
            label = labels[i]
        out.append((label or os.path.splitext(os.path.basename(path))[0], rep))
    return out


def write_comparison(
    reports: Sequence[tuple[str, MetricsReport]], out_dir: str
) -> tuple[str, list[str]]:
    """Emit comparison.csv and plots/<metric>.png under out_dir.

    Only metrics present in at least one run appear; absent values are left
    blank in the table and skipped in the plots."""
    os.makedirs(os.path.join(out_dir, "plots"), exist_ok=True)
    present = [
        m for m in TABLE_METRICS if any(getattr(r, m) is not None for _, r in reports)
    ]
    table_path = os.path.join(out_dir, "comparison.csv")
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + present)
        for label, rep in reports:
            writer.writerow(
                [label]
                + [
                    "" if getattr(rep, m) is None else f"{getattr(rep, m):.6g}"
                    for m in present
                ]
            )

    plot_paths = []
    for metric in present:
        pairs = [(label, getattr(rep, metric)) for label, rep in reports if getattr(rep, metric) is not None]
        fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(pairs), 3.2))
        ax.bar([p[0] for p in pairs], [p[1] for p in pairs], color="#4878cf")
        ax.set_ylabel(metric)
        ax.set_title(metric.replace("_", " "))
        ax.tick_params(axis="x", rotation=20)
        fig.tight_layout()
        path = os.path.join(out_dir, "plots", f"{metric}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        plot_paths.append(path)
    return table_path, plot_paths


def plot_loss_curves(curves: Sequence[tuple[str, list[dict]]], out_path: str):
    """Line plot of total loss per step for any number of runs."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, records in curves:
        steps = [r["step"] for r in records]
        totals = [r["total"] for r in records]
        ax.plot(steps, totals, label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_video_grid(video, out_path: str, max_frames: int = 8):
    """Export a video's frames as a single image strip for quick inspection."""
    import numpy as np

    F = video.shape[0]
    idx = np.linspace(0, F - 1, min(max_frames, F)).round().astype(int)
    fig, axes = plt.subplots(1, len(idx), figsize=(1.4 * len(idx), 1.6))
    if len(idx) == 1:
        axes = [axes]
    for ax, j in zip(axes, idx):
        frame = np.transpose((video[j] + 1.0) / 2.0, (1, 2, 0)).clip(0, 1)
        ax.imshow(frame)
        ax.set_title(f"f{j}", fontsize=7)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
