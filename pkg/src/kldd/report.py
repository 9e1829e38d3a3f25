"""CSV writers and the matplotlib figures rendered alongside them.

Matplotlib is imported lazily with the Agg backend so report generation
works headless and costs nothing unless a figure is actually requested.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .losses import MetricsReport

LOSS_FIELDS = ("step", "noise", "cldice", "total")
METRIC_FIELDS = ("id", "acc", "sen", "spe", "auc", "dice", "iou", "cl_dice")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def append_loss_rows(path, rows: list[tuple[int, float, float, float]]) -> None:
    """Append (step, noise, cldice, total) rows, writing the header once."""
    path = Path(path)
    fresh = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOSS_FIELDS)
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])


def read_loss_csv(path) -> dict[str, np.ndarray]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {
        k: np.array([float(r[k]) for r in rows])
        for k in LOSS_FIELDS
    }


def save_loss_figure(loss_csv, out_png) -> None:
    """Render the per-step loss components from a training log."""
    data = read_loss_csv(loss_csv)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(data["step"], data["total"], label="total", lw=1.2)
    ax.plot(data["step"], data["noise"], label="noise", lw=0.9, alpha=0.8)
    ax.plot(data["step"], data["cldice"], label="centerline", lw=0.9, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def write_metrics_csv(path, per_image: list[tuple[str, MetricsReport]],
                      aggregate: MetricsReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for name, rep in per_image:
            d = rep.to_dict()
            writer.writerow([name] + [f"{d[k]:.6f}" for k in METRIC_FIELDS[1:]])
        d = aggregate.to_dict()
        writer.writerow(["aggregate"] + [f"{d[k]:.6f}" for k in METRIC_FIELDS[1:]])


def save_metrics_figure(per_image: list[tuple[str, MetricsReport]],
                        aggregate: MetricsReport, out_png) -> None:
    """Aggregate bars with per-image scatter on top."""
    plt = _pyplot()
    keys = METRIC_FIELDS[1:]
    agg = aggregate.to_dict()
    fig, ax = plt.subplots(figsize=(8, 4.5))
    xs = np.arange(len(keys))
    ax.bar(xs, [agg[k] for k in keys], width=0.55, alpha=0.65, label="aggregate")
    rng = np.random.default_rng(0)
    for _, rep in per_image:
        d = rep.to_dict()
        jitter = rng.uniform(-0.12, 0.12, size=len(keys))
        ax.plot(xs + jitter, [d[k] for k in keys], ".", color="black", ms=4, alpha=0.5)
    ax.set_xticks(xs, keys)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def write_taps_csv(path, rows: list[dict]) -> None:
    """Receptive-field tap table: one row per sampled kernel point."""
    fields = ("row", "col", "mode", "orientation", "tap", "tap_row", "tap_col")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def save_rf_overlay(image2d: np.ndarray, rows: list[dict], out_png) -> None:
    """Scatter every tap point over the source image, styled by mode."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(image2d, cmap="gray", vmin=0.0, vmax=1.0)
    styles = {
        ("kalman", "horizontal"): dict(color="tab:red", marker="o"),
        ("kalman", "vertical"): dict(color="tab:orange", marker="o"),
        ("cumulative", "horizontal"): dict(color="tab:blue", marker="x"),
        ("cumulative", "vertical"): dict(color="tab:cyan", marker="x"),
    }
    for (mode, orient), style in styles.items():
        pts = [(r["tap_col"], r["tap_row"]) for r in rows
               if r["mode"] == mode and r["orientation"] == orient]
        if pts:
            xs, ys = zip(*pts)
            ax.scatter(xs, ys, s=26, label=f"{mode} {orient}", **style)
    ax.legend(loc="upper right", fontsize=8)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
