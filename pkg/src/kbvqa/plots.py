"""Figure rendering for training logs, sweeps, ablations, and attention.

Everything draws through the Agg backend and writes straight to files; the
CSVs remain the canonical record, these are the human-readable view.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def loss_curves(log, path) -> None:
    steps = [r[0] for r in log.step_rows]
    reader = [r[1] for r in log.step_rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, reader, label="reader loss", lw=0.8)
    retr = [(r[0], r[2]) for r in log.step_rows if r[2] is not None]
    if retr:
        ax.plot([r[0] for r in retr], [r[1] for r in retr],
                label="retriever loss", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def accuracy_curves(log, path) -> None:
    rows = [r for r in log.epoch_rows if r[2] is not None]
    if not rows:
        return
    epochs = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [r[2] for r in rows], marker="o", label="val accuracy")
    if any(r[3] is not None for r in rows):
        ax.plot(epochs, [r[3] for r in rows], marker="s", label="recall@1")
        ax.plot(epochs, [r[4] for r in rows], marker="^", label="recall@t")
    ax.set_xlabel("epoch")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def sweep_plot(values, accuracies, recalls, xlabel, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(values, accuracies, marker="o", label="val accuracy")
    if any(r is not None for r in recalls):
        ax.plot(values, [r if r is not None else np.nan for r in recalls],
                marker="s", label="recall@1")
    ax.set_xlabel(xlabel)
    ax.set_ylim(0, 1)
    ax.set_xticks(list(values))
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def ablation_bars(names, accuracies, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    xs = np.arange(len(names))
    ax.bar(xs, accuracies, color="#4878a8")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("val accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def attention_heatmaps(grids: np.ndarray, path, title: str = "") -> None:
    """grids: (heads, g, g) patch attention, one panel per head."""
    heads = grids.shape[0]
    fig, axes = plt.subplots(1, heads, figsize=(3.2 * heads, 3.2),
                             squeeze=False)
    vmax = float(grids.max()) or 1.0
    for h in range(heads):
        ax = axes[0][h]
        im = ax.imshow(grids[h], cmap="viridis", vmin=0.0, vmax=vmax)
        ax.set_title(f"head {h}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=[axes[0][h] for h in range(heads)],
                 fraction=0.03)
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
