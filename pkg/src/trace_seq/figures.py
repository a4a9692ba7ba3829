"""Figure rendering for the CLI report paths (PNG next to each CSV/JSON)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import AttentionMap, pr_curve_points

# stable metadata so re-rendering a figure is byte-identical
_PNG_META = {"Software": "trace-seq"}


def _save(fig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.png")
    fig.savefig(tmp, dpi=140, metadata=_PNG_META)
    plt.close(fig)
    os.replace(tmp, path)


def save_pr_curve(labels, scores, path: str | Path, title: str = "") -> None:
    recalls, precisions = pr_curve_points(labels, scores)
    prevalence = float(np.asarray(labels, dtype=float).mean())
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(recalls, precisions, where="post")
    ax.axhline(prevalence, color="gray", linestyle="--", linewidth=1, label="prevalence")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right")
    fig.tight_layout()
    _save(fig, path)


def save_loss_curves(
    history: Sequence[dict], fields: Sequence[str], path: str | Path, title: str = ""
) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    epochs = [row["epoch"] for row in history]
    for name in fields:
        if any(name in row for row in history):
            ax.plot(epochs, [row.get(name, np.nan) for row in history], label=name)
    ax.set_xlabel("epoch")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def save_attention_heatmap(m: AttentionMap, path: str | Path, title: str = "") -> None:
    """Concept-by-concept heatmap over the visit's active features."""
    sub = m.active_submatrix()
    labels = m.active_labels
    size = max(3.0, 0.42 * len(labels) + 1.6)
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(sub, cmap="viridis")
    ax.set_xticks(range(len(labels)))
    ax.set_yticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_yticklabels(labels, fontsize=7)
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(title or f"visit {m.visit_index}")
    fig.tight_layout()
    _save(fig, path)
