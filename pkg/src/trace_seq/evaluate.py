"""Ranking and likelihood metrics, plus attention back-projection.

These are deliberately independent of the training code: the AUPRC here is
computed from sorted score groups, and the likelihood from the plain
clamped formula, so they can cross-check model outputs.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, ValidationError


@dataclass
class ScoredCohort:
    """Per-patient scores for one evaluated split."""

    ids: list[str]
    labels: np.ndarray
    scores: np.ndarray
    split: str = "test"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=float)
        self.scores = np.asarray(self.scores, dtype=float)
        if not (len(self.ids) == self.labels.shape[0] == self.scores.shape[0]):
            raise ValidationError("ScoredCohort: ragged columns")


def _check_binary(labels: np.ndarray) -> None:
    if labels.size == 0:
        raise ValidationError("metrics: empty input")
    pos = labels.sum()
    if pos == 0 or pos == labels.size:
        raise ValidationError("metrics: need at least one positive and one negative")


def auprc(labels, scores) -> float:
    """Average precision without interpolation.

    Patients are sorted by descending score; tied scores form one threshold
    group, evaluated at the group boundary, so permuting tied patients
    cannot change the value. Each group contributes its recall increment
    times the precision at its boundary.
    """
    labels = np.asarray(labels, dtype=float)
    scores = np.asarray(scores, dtype=float)
    if labels.shape != scores.shape:
        raise ValidationError("auprc: labels/scores length mismatch")
    _check_binary(labels)
    if not np.all(np.isfinite(scores)):
        raise ValidationError("auprc: scores must be finite")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    n_pos = y.sum()
    ap = 0.0
    tp = 0.0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        group_tp = y[i:j].sum()
        tp += group_tp
        if group_tp > 0:
            precision = tp / j
            ap += (group_tp / n_pos) * precision
        i = j
    return float(ap)


def pr_curve_points(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) at each distinct-score boundary, for plotting."""
    labels = np.asarray(labels, dtype=float)
    scores = np.asarray(scores, dtype=float)
    _check_binary(labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    n_pos = y.sum()
    recalls = [0.0]
    precisions = [1.0]
    tp = 0.0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        tp += y[i:j].sum()
        recalls.append(tp / n_pos)
        precisions.append(tp / j)
        i = j
    return np.array(recalls), np.array(precisions)


def neg_log_likelihood(labels, scores) -> float:
    """Mean binary cross entropy with probabilities clamped at 1e-12."""
    labels = np.asarray(labels, dtype=float)
    scores = np.asarray(scores, dtype=float)
    if labels.shape != scores.shape:
        raise ValidationError("neg_log_likelihood: length mismatch")
    if labels.size == 0:
        raise ValidationError("neg_log_likelihood: empty input")
    p = np.clip(scores, 1e-12, 1 - 1e-12)
    return float(-(labels * np.log(p) + (1 - labels) * np.log1p(-p)).mean())


# ---------------------------------------------------------------------------
# attention back-projection


@dataclass
class AttentionMap:
    """One visit's attention in downsized and original feature space."""

    visit_index: int
    downsized: np.ndarray        # (downsized, downsized)
    full: np.ndarray             # (n_features, n_features)
    active_indices: list[int]
    active_labels: list[str]

    def active_submatrix(self) -> np.ndarray:
        idx = np.array(self.active_indices, dtype=int)
        return self.full[np.ix_(idx, idx)]


def backproject_attention(
    attention: np.ndarray,
    w_downsize: np.ndarray,
    active_indices: Sequence[int],
    feature_names: Sequence[str],
    visit_index: int = 0,
) -> AttentionMap:
    """Carry downsized attention back to original features: W^T A W.

    The emitted heatmap is restricted to the visit's active features; the
    full matrix is retained for the linearity/mass checks.
    """
    attention = np.asarray(attention, dtype=float)
    w_downsize = np.asarray(w_downsize, dtype=float)
    if attention.ndim != 2 or attention.shape[0] != attention.shape[1]:
        raise DimensionError(f"backproject_attention: attention must be square, got {attention.shape}")
    if w_downsize.shape[0] != attention.shape[0]:
        raise DimensionError(
            f"backproject_attention: downsize map {w_downsize.shape} does not match "
            f"attention {attention.shape}"
        )
    full = w_downsize.T @ attention @ w_downsize
    active = sorted(int(i) for i in active_indices)
    return AttentionMap(
        visit_index=visit_index,
        downsized=attention,
        full=full,
        active_indices=active,
        active_labels=[feature_names[i] for i in active],
    )


def write_attention_csv(path: str | Path, maps: Sequence[AttentionMap]) -> None:
    """Rows (visit_index, row_feature, col_feature, weight), active cells only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["visit_index", "row_feature", "col_feature", "weight"])
        for m in maps:
            sub = m.active_submatrix()
            for i, row_name in enumerate(m.active_labels):
                for j, col_name in enumerate(m.active_labels):
                    writer.writerow([m.visit_index, row_name, col_name, f"{sub[i, j]:.12g}"])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# embedding and score exports


def write_embeddings_csv(path: str | Path, rows: Sequence[tuple[str, int, np.ndarray]]) -> None:
    """One row per patient: id, label, embedding components; sorted by id."""
    path = Path(path)
    rows = sorted(rows, key=lambda r: r[0])
    width = len(rows[0][2]) if rows else 0
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"e{i + 1}" for i in range(width)])
        for pid, label, emb in rows:
            writer.writerow([pid, label] + [f"{v:.12g}" for v in emb])
    os.replace(tmp, path)


def write_scores_csv(path: str | Path, scored: ScoredCohort) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "score", "split"])
        for pid, label, score in zip(scored.ids, scored.labels, scored.scores):
            writer.writerow([pid, int(label), f"{score:.12g}", scored.split])
    os.replace(tmp, path)
