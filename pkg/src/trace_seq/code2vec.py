"""Visit-context pre-training of the medical-code embedding table.

The embedding is learned on a separate corpus with its own (larger) code
vocabulary: for each visit, the codes present must predict the distribution
of codes in neighboring visits. Experiment-vocabulary codes missing from
the pre-training vocabulary are out-of-vocabulary and embed to zeros, both
before and after fine-tuning.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit as nk
from .ehr import CodeVocabulary, PatientRecord
from .errors import ConfigError, ValidationError


@dataclass
class WindowInstance:
    """One training pair: a visit's codes and its context-union codes."""

    center: tuple[int, ...]
    context: tuple[int, ...]


def build_visit_windows(
    patients: Sequence[PatientRecord], window: int = 1
) -> list[WindowInstance]:
    """Pair each visit with the union of codes within +/- ``window`` visits.

    Visits whose context is empty (single-visit patients) yield nothing.
    """
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    out = []
    for p in patients:
        visits = p.visits
        for t, v in enumerate(visits):
            ctx: set[int] = set()
            for off in range(-window, window + 1):
                if off == 0:
                    continue
                j = t + off
                if 0 <= j < len(visits):
                    ctx.update(visits[j].code_indices)
            if ctx:
                out.append(
                    WindowInstance(center=tuple(v.code_indices), context=tuple(sorted(ctx)))
                )
    return out


@dataclass
class CodeEmbeddingTable:
    """Pre-trained embedding rows over the pre-training vocabulary."""

    vocabulary: CodeVocabulary
    matrix: np.ndarray  # (|codes|, d_m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class TrainCurve:
    epoch_losses: list[float]


def train_code_embeddings(
    instances: Sequence[WindowInstance],
    vocab: CodeVocabulary,
    dim: int = 128,
    epochs: int = 10,
    batch_size: int = 100,
    seed: int = 0,
    rho: float = 0.95,
    eps: float = 1e-6,
    lr: float = 1.0,
) -> tuple[CodeEmbeddingTable, TrainCurve]:
    """Fit the embedding by predicting context-code distributions.

    Forward per instance: h = relu(sum of embedding rows for the visit's
    codes); softmax over a linear readout predicts the count-normalized
    context multi-hot; loss is cross entropy, optimized with Adadelta.
    """
    if not instances:
        raise ValidationError("train_code_embeddings: no instances")
    n_codes = len(vocab)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 4)))
    embed = nk.Param("codes.table", nk.glorot_uniform(rng, (n_codes, dim)))
    out_w = nk.Param("codes.out_w", nk.glorot_uniform(rng, (dim, n_codes)))
    out_b = nk.Param("codes.out_b", np.zeros(n_codes))
    params = [embed, out_w, out_b]

    # precompute dense vectors once
    centers = np.zeros((len(instances), n_codes))
    targets = np.zeros((len(instances), n_codes))
    for i, inst in enumerate(instances):
        centers[i, list(inst.center)] = 1.0
        targets[i, list(inst.context)] = 1.0 / len(inst.context)

    curve = TrainCurve(epoch_losses=[])
    order = np.arange(len(instances))
    for _ in range(epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            with nk.Tape() as tape:
                total = None
                for i in batch:
                    h = nk.relu(nk.matmul(nk.constant(centers[i]), embed))
                    logits = nk.add(nk.matmul(h, out_w), out_b)
                    li = nk.ce_softmax(logits, nk.constant(targets[i]))
                    total = li if total is None else nk.add(total, li)
                total = nk.smul(total, 1.0 / len(batch))
            nk.backward(tape, total)
            nk.adadelta_step(params, rho=rho, eps=eps, lr=lr)
            epoch_loss += float(total.data) * len(batch)
        curve.epoch_losses.append(epoch_loss / len(order))
    return CodeEmbeddingTable(vocabulary=vocab, matrix=embed.data.copy()), curve


# ---------------------------------------------------------------------------
# vocabulary alignment and lookup


@dataclass
class AlignmentMap:
    """Experiment code index -> pre-training row index (or None for OOV)."""

    pretrain_index: list[int | None]

    def n_oov(self) -> int:
        return sum(1 for i in self.pretrain_index if i is None)


def build_alignment(experiment_vocab: CodeVocabulary, table: CodeEmbeddingTable) -> AlignmentMap:
    rows = table.vocabulary.index
    return AlignmentMap(
        pretrain_index=[rows.get(code) for code in experiment_vocab.codes]
    )


def aligned_multihot(x: np.ndarray, alignment: AlignmentMap, n_pretrain: int) -> np.ndarray:
    """Map an experiment-space multi-hot into pre-training space (OOV drops)."""
    out = np.zeros(n_pretrain)
    for i in np.flatnonzero(x):
        j = alignment.pretrain_index[int(i)]
        if j is not None:
            out[j] = x[i]
    return out


def embed_codes(x: np.ndarray, table, alignment: AlignmentMap | None):
    """Sum the embedding rows of a visit's codes; OOV rows contribute zero.

    ``table`` may be a plain matrix (returns an array) or a trainable
    parameter (returns a tensor on the active tape, so fine-tuning reaches
    the rows used).
    """
    if alignment is None:
        raise ConfigError("embed_codes: missing vocabulary alignment map")
    if isinstance(table, nk.Tensor):
        aligned = aligned_multihot(np.asarray(x, dtype=float), alignment, table.data.shape[0])
        return nk.matmul(nk.constant(aligned), table)
    matrix = np.asarray(table)
    aligned = aligned_multihot(np.asarray(x, dtype=float), alignment, matrix.shape[0])
    return aligned @ matrix


# ---------------------------------------------------------------------------
# persistence


def save_embedding(
    base: str | Path, table: CodeEmbeddingTable, alignment_path: str | Path | None = None,
    experiment_vocab: CodeVocabulary | None = None, alignment: AlignmentMap | None = None,
    seed: int = 0,
) -> None:
    """Persist the table as a checkpoint plus an optional alignment JSON."""
    param = nk.Param("codes.table", table.matrix)
    nk.save_checkpoint(base, [param], seed=seed)
    meta = {
        "pretrain_codes": [[c, table.vocabulary.kinds[c]] for c in table.vocabulary.codes],
        "dim": table.dim,
        "pretrain_vocab_sha256": table.vocabulary.content_hash(),
    }
    if alignment is not None and experiment_vocab is not None:
        meta["experiment_vocab_sha256"] = experiment_vocab.content_hash()
        meta["pretrain_index"] = alignment.pretrain_index
    path = Path(alignment_path) if alignment_path else Path(str(base) + ".align.json")
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    os.replace(tmp, path)


def load_embedding(base: str | Path, alignment_path: str | Path | None = None):
    """Load (table, alignment-or-None, seed) written by save_embedding."""
    values, seed = nk.load_checkpoint(base)
    path = Path(alignment_path) if alignment_path else Path(str(base) + ".align.json")
    meta = json.loads(path.read_text())
    vocab = CodeVocabulary(
        index={c: i for i, (c, _) in enumerate(meta["pretrain_codes"])},
        kinds={c: k for c, k in meta["pretrain_codes"]},
        min_count=1,
    )
    table = CodeEmbeddingTable(vocabulary=vocab, matrix=values["codes.table"])
    alignment = None
    if "pretrain_index" in meta:
        alignment = AlignmentMap(pretrain_index=meta["pretrain_index"])
    return table, alignment, seed
