"""Matplotlib figure rendering for training logs, evaluation reports, and
ablation tables. All functions write files and return the written paths."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

LOSS_TERMS = ("total", "mano", "3d", "2d", "jrel", "close")


def plot_loss_curves(logs: list[dict], out_path: Path) -> Path:
    """Per-term loss curves on a log scale."""
    steps = [r["step"] for r in logs]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for term in LOSS_TERMS:
        if term in logs[0]:
            vals = np.array([r[term] for r in logs], dtype=np.float64)
            ax.plot(steps, np.maximum(vals, 1e-12), label=term, lw=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(ncols=3, fontsize=8)
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_lr_grad(logs: list[dict], out_path: Path) -> Path:
    """Learning-rate schedule and clipped gradient norm."""
    steps = [r["step"] for r in logs]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax1.plot(steps, [r["lr"] for r in logs], color="tab:blue", lw=1.2)
    ax1.set_ylabel("lr")
    ax2.plot(steps, [r["grad_norm"] for r in logs], color="tab:orange", lw=0.8)
    ax2.set_yscale("log")
    ax2.set_ylabel("grad norm")
    ax2.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_frame_traces(records: list[dict], T: int, out_path: Path, max_traces: int = 8) -> Path:
    """Per-frame joint-error traces for the first few evaluated sequences."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for rec in records[:max_traces]:
        frames = np.array(rec["mpjpe_frames"], dtype=np.float64)  # (T, 2)
        ax.plot(range(T), frames.mean(axis=1), lw=1.0, alpha=0.8,
                label=f"seq {rec.get('index', '?')}")
    ax.set_xlabel("frame")
    ax.set_ylabel("joint error (mm)")
    ax.set_title("per-frame joint error")
    ax.legend(fontsize=7, ncols=2)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_metric_bars(summary: dict, out_path: Path,
                     metric_keys=("mpjpe_mm", "mpvpe_mm", "mrrpe_mm")) -> Path:
    """Grouped bars comparing the ablation variants on the main metrics."""
    variants = list(summary.keys())
    fig, axes = plt.subplots(1, len(metric_keys), figsize=(4 * len(metric_keys), 3.6))
    if len(metric_keys) == 1:
        axes = [axes]
    for ax, key in zip(axes, metric_keys):
        vals = [summary[v][key] for v in variants]
        ax.bar(range(len(variants)), vals, color="tab:blue")
        ax.set_xticks(range(len(variants)))
        ax.set_xticklabels(variants, rotation=35, ha="right", fontsize=8)
        ax.set_title(key)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
