"""Matplotlib rendering for the CLI report paths.

Figures are rendered to files next to the delimited outputs they
illustrate; the library's evaluation code never imports this module.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_hypnogram_figure(pred, truth, path: str | Path, subject_id: str = "") -> None:
    """Expert vs network staging as two step traces over epoch index."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    epochs = np.arange(len(pred))
    fig, ax = plt.subplots(figsize=(10, 3))
    ax.step(epochs, truth + 1.5, where="post", color="tab:red", label="expert")
    ax.step(epochs, pred, where="post", color="tab:blue", label="network")
    ax.set_yticks([0, 1, 1.5, 2.5])
    ax.set_yticklabels(["S", "W", "S", "W"])
    ax.set_xlabel("epoch (30 s)")
    ax.set_title(f"hypnogram {subject_id}".strip())
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_attention_figure(matrix, layer: int, path: str | Path, subject_id: str = "") -> None:
    """Head-averaged attention heat map for one encoder layer."""
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    image = ax.imshow(matrix, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xlabel("input epoch")
    ax.set_ylabel("output epoch")
    ax.set_title(f"attention layer {layer} {subject_id}".strip())
    fig.colorbar(image, ax=ax, label="attention weight")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(report, path: str | Path) -> None:
    """Per-patient accuracy and kappa bars with average lines."""
    ids = [p.subject_id for p in report.patients]
    acc = [p.metrics.acc if p.metrics.acc is not None else 0.0 for p in report.patients]
    kappa = [p.metrics.kappa if p.metrics.kappa is not None else 0.0 for p in report.patients]
    x = np.arange(len(ids))
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(ids)), 4))
    ax.bar(x - 0.2, acc, width=0.4, label="accuracy", color="tab:blue")
    ax.bar(x + 0.2, kappa, width=0.4, label="kappa", color="tab:orange")
    if report.average.acc is not None:
        ax.axhline(report.average.acc, color="tab:blue", linestyle="--", linewidth=1)
    if report.average.kappa is not None:
        ax.axhline(report.average.kappa, color="tab:orange", linestyle="--", linewidth=1)
    ax.set_xticks(x)
    ax.set_xticklabels(ids, rotation=90, fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title("per-patient metrics")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
