"""Disease-onset predictors: the joint-attention sequence model, its
ablations, and the LR/MLP/RNN/BiRNN baselines.

Sequence variants load the pre-trained encoder and (when the code-history
branch is on) the pre-trained code-embedding table; every loaded parameter
is fine-tuned. The ``*_base`` variants classify on the patient embedding
alone. RACE variants are identical except their visit encoder is the
fully-connected one, taken from the matching pre-trained checkpoint.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numkit as nk
from .autoencoder import AutoencoderHyper, EncoderParams, encode_sequence, init_encoder
from .code2vec import AlignmentMap, aligned_multihot
from .ehr import FeatureSpace, PatientRecord, VisitVector, assemble_sequence
from .errors import ConfigError, DivergenceError, ValidationError
from .evaluate import ScoredCohort, auprc, neg_log_likelihood

VARIANTS = ("TRACE", "TRACE_base", "RACE", "RACE_base", "LR", "MLP", "RNN", "BiRNN")
SEQUENCE_VARIANTS = ("TRACE", "TRACE_base", "RACE", "RACE_base")


@dataclass
class PatientInputs:
    """Precomputed per-patient model inputs."""

    id: str
    label: int
    vecs: list[VisitVector]
    aligned: Optional[list[np.ndarray]] = None  # pre-training-space multi-hots
    counts: Optional[np.ndarray] = None         # bag-of-occurrences features


def prepare_inputs(
    patients: Sequence[PatientRecord],
    space: FeatureSpace,
    max_visits: int = 30,
    alignment: AlignmentMap | None = None,
    n_pretrain_codes: int = 0,
    with_counts: bool = False,
) -> list[PatientInputs]:
    out = []
    for p in patients:
        vecs = assemble_sequence(p, space, max_visits)
        aligned = None
        if alignment is not None:
            aligned = [aligned_multihot(v.x, alignment, n_pretrain_codes) for v in vecs]
        counts = None
        if with_counts:
            code_counts = np.sum([v.x for v in vecs], axis=0)
            obs_counts = np.sum([v.d[: space.n_observations] for v in vecs], axis=0)
            last = vecs[-1].d[space.n_observations :]
            counts = np.concatenate([code_counts, obs_counts, last])
        out.append(PatientInputs(id=p.id, label=p.label, vecs=vecs, aligned=aligned, counts=counts))
    return out


# ---------------------------------------------------------------------------
# joint attention over the code history


def encode_code_history(
    aligned: Sequence[np.ndarray], table: nk.Param, rnn: nk.GRUParams
) -> list[nk.Tensor]:
    """Embed each visit's codes and run the history GRU; returns all states."""
    if not aligned:
        raise ValidationError("encode_code_history: empty sequence")
    states = []
    h = nk.constant(np.zeros(rnn.hidden_dim))
    for x in aligned:
        m = nk.matmul(nk.constant(x), table)
        h = nk.gru_step(h, m, rnn)
        states.append(h)
    return states


def joint_attention(
    ep: nk.Tensor,
    history: Sequence[nk.Tensor],
    w: nk.Param,
    b: nk.Param,
    u: nk.Param,
) -> tuple[nk.Tensor, nk.Tensor]:
    """Visit weights from the patient embedding paired with each history state.

    Returns (weights over visits, the stacked paired vectors) so the caller
    can form the weighted context.
    """
    if not history:
        raise ValidationError("joint_attention: empty history")
    g = nk.stack_rows([nk.concat([ep, h]) for h in history])
    scores = nk.matmul(nk.tanh(nk.add_rowvec(nk.matmul(g, w), b)), u)
    alpha = nk.reshape(nk.softmax_rows(nk.reshape(scores, (1, len(history)))), (len(history),))
    return alpha, g


# ---------------------------------------------------------------------------
# models


@dataclass
class SequencePredictor:
    variant: str
    encoder: EncoderParams
    out_w: nk.Param
    out_b: nk.Param
    code_table: Optional[nk.Param] = None
    code_rnn: Optional[nk.GRUParams] = None
    attn_w: Optional[nk.Param] = None
    attn_b: Optional[nk.Param] = None
    attn_u: Optional[nk.Param] = None

    @property
    def with_history(self) -> bool:
        return self.code_rnn is not None

    def params(self) -> list[nk.Param]:
        out = self.encoder.params()
        if self.with_history:
            out += [self.code_table] + self.code_rnn.params()
            out += [self.attn_w, self.attn_b, self.attn_u]
        return out + [self.out_w, self.out_b]

    def forward(self, pi: PatientInputs, mode: str = "eval", rng=None) -> nk.Tensor:
        ep = encode_sequence(pi.vecs, self.encoder, mode, rng).patient_embedding
        if self.with_history:
            if pi.aligned is None:
                raise ConfigError("sequence predictor: inputs lack aligned code vectors")
            history = encode_code_history(pi.aligned, self.code_table, self.code_rnn)
            alpha, g = joint_attention(ep, history, self.attn_w, self.attn_b, self.attn_u)
            context = nk.concat([ep, nk.matmul(alpha, g)])
        else:
            context = ep
        return nk.sigmoid(nk.add(nk.matmul(self.out_w, context), self.out_b))

    def embedding(self, pi: PatientInputs) -> np.ndarray:
        return encode_sequence(pi.vecs, self.encoder).patient_embedding.data.copy()


@dataclass
class CountsBaseline:
    variant: str  # LR | MLP
    out_w: nk.Param
    out_b: nk.Param
    hidden_w: Optional[nk.Param] = None
    hidden_b: Optional[nk.Param] = None

    def params(self) -> list[nk.Param]:
        out = []
        if self.hidden_w is not None:
            out += [self.hidden_w, self.hidden_b]
        return out + [self.out_w, self.out_b]

    def forward(self, pi: PatientInputs, mode: str = "eval", rng=None) -> nk.Tensor:
        x = nk.constant(pi.counts)
        if self.hidden_w is not None:
            x = nk.relu(nk.add(nk.matmul(x, self.hidden_w), self.hidden_b))
        return nk.sigmoid(nk.add(nk.matmul(self.out_w, x), self.out_b))


@dataclass
class RnnBaseline:
    variant: str  # RNN | BiRNN
    enc_w: nk.Param
    enc_b: nk.Param
    rnn_fwd: nk.GRUParams
    out_w: nk.Param
    out_b: nk.Param
    rnn_bwd: Optional[nk.GRUParams] = None

    def params(self) -> list[nk.Param]:
        out = [self.enc_w, self.enc_b] + self.rnn_fwd.params()
        if self.rnn_bwd is not None:
            out += self.rnn_bwd.params()
        return out + [self.out_w, self.out_b]

    def forward(self, pi: PatientInputs, mode: str = "eval", rng=None) -> nk.Tensor:
        inputs = [
            nk.relu(nk.add(nk.matmul(nk.constant(v.concat), self.enc_w), self.enc_b))
            for v in pi.vecs
        ]
        h = nk.constant(np.zeros(self.rnn_fwd.hidden_dim))
        for x in inputs:
            h = nk.gru_step(h, x, self.rnn_fwd)
        last = h
        if self.rnn_bwd is not None:
            hb = nk.constant(np.zeros(self.rnn_bwd.hidden_dim))
            for x in reversed(inputs):
                hb = nk.gru_step(hb, x, self.rnn_bwd)
            last = nk.concat([last, hb])
        return nk.sigmoid(nk.add(nk.matmul(self.out_w, last), self.out_b))


Model = SequencePredictor | CountsBaseline | RnnBaseline


@dataclass
class PredictorHyper:
    downsized_dim: int = 100
    embed_dim: int = 128
    ff_dim: int = 0
    dropout: float = 0.5
    attention_dim: int = 0  # 0 means embed_dim

    @property
    def d_att(self) -> int:
        return self.attention_dim or self.embed_dim


def init_model(
    variant: str,
    space: FeatureSpace,
    hyper: PredictorHyper,
    seed: int,
    encoder_values: dict[str, np.ndarray] | None = None,
    code_matrix: np.ndarray | None = None,
) -> Model:
    """Build a model of the given variant, loading pre-trained pieces.

    Sequence variants require ``encoder_values`` (the pre-trained encoder
    checkpoint); history-bearing variants additionally require the
    pre-trained ``code_matrix``.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 6)))
    d = hyper.embed_dim

    def glorot(name, shape):
        return nk.Param(name, nk.glorot_uniform(rng, shape))

    if variant in SEQUENCE_VARIANTS:
        if encoder_values is None:
            raise ConfigError(f"variant {variant}: missing pre-trained encoder checkpoint")
        kind = "relu" if variant.startswith("RACE") else "transformer"
        enc_hyper = AutoencoderHyper(
            downsized_dim=hyper.downsized_dim, embed_dim=d, ff_dim=hyper.ff_dim,
            dropout=hyper.dropout, visit_encoder=kind,
        )
        encoder = init_encoder(space.dim, enc_hyper, rng)
        nk.restore(encoder.params(), encoder_values)
        with_history = not variant.endswith("_base")
        if with_history:
            if code_matrix is None:
                raise ConfigError(f"variant {variant}: missing pre-trained code embeddings")
            code_table = nk.Param("codes.table", code_matrix.copy())
            code_rnn = nk.init_gru("codes.rnn", code_matrix.shape[1], d, rng)
            attn_w = glorot("attn.w", (2 * d, hyper.d_att))
            attn_b = nk.Param("attn.b", np.zeros(hyper.d_att))
            attn_u = glorot("attn.u", (hyper.d_att,))
            out_w = glorot("out.w", (3 * d,))
        else:
            code_table = code_rnn = attn_w = attn_b = attn_u = None
            out_w = glorot("out.w", (d,))
        return SequencePredictor(
            variant=variant, encoder=encoder,
            code_table=code_table, code_rnn=code_rnn,
            attn_w=attn_w, attn_b=attn_b, attn_u=attn_u,
            out_w=out_w, out_b=nk.Param("out.b", np.zeros(())),
        )

    if variant in ("LR", "MLP"):
        n = space.dim
        if variant == "MLP":
            return CountsBaseline(
                variant=variant,
                hidden_w=glorot("hidden.w", (n, d)),
                hidden_b=nk.Param("hidden.b", np.zeros(d)),
                out_w=glorot("out.w", (d,)),
                out_b=nk.Param("out.b", np.zeros(())),
            )
        return CountsBaseline(
            variant=variant,
            out_w=glorot("out.w", (n,)),
            out_b=nk.Param("out.b", np.zeros(())),
        )

    rnn_bwd = nk.init_gru("rnn_bwd", d, d, rng) if variant == "BiRNN" else None
    out_dim = 2 * d if variant == "BiRNN" else d
    return RnnBaseline(
        variant=variant,
        enc_w=glorot("enc_fc.w", (space.dim, d)),
        enc_b=nk.Param("enc_fc.b", np.zeros(d)),
        rnn_fwd=nk.init_gru("rnn_fwd", d, d, rng),
        rnn_bwd=rnn_bwd,
        out_w=glorot("out.w", (out_dim,)),
        out_b=nk.Param("out.b", np.zeros(())),
    )


# ---------------------------------------------------------------------------
# training and scoring


def inference_threads() -> int:
    try:
        return max(1, int(os.environ.get("TRACE_SEQ_THREADS", "1")))
    except ValueError:
        return 1


def score_inputs(model: Model, inputs: Sequence[PatientInputs], split: str = "test") -> ScoredCohort:
    """Eval-mode scores for a set of patients, in input order.

    Forward passes are read-only, so they may run on a small thread pool
    (capped by TRACE_SEQ_THREADS); results keep the fixed input order.
    """
    threads = inference_threads()
    if threads > 1 and len(inputs) > 8:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(lambda pi: float(model.forward(pi).data), inputs))
    else:
        scores = [float(model.forward(pi).data) for pi in inputs]
    return ScoredCohort(
        ids=[pi.id for pi in inputs],
        labels=np.array([pi.label for pi in inputs], dtype=float),
        scores=np.array(scores),
        split=split,
    )


@dataclass
class TrainedPredictor:
    model: Model
    metrics: dict
    history: list[dict] = field(default_factory=list)


def train_model(
    model: Model,
    inputs: dict[str, list[PatientInputs]],
    epochs: int = 50,
    batch_size: int = 100,
    seed: int = 0,
    rho: float = 0.95,
    eps: float = 1e-6,
    lr: float = 1.0,
) -> TrainedPredictor:
    """Minimize mean binary cross entropy on the train split.

    Logs validation AUPRC per epoch, restores the best-validation
    parameters at the end, and reports test AUPRC and negative log
    likelihood at that checkpoint.
    """
    train = inputs.get("train") or []
    if not train:
        raise ValidationError("train_model: empty train split")
    valid = inputs.get("valid") or []
    test = inputs.get("test") or []
    plist = model.params()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 7)))
    order = np.arange(len(train))
    history: list[dict] = []
    best_auprc = -np.inf
    best_epoch = -1
    best_values = {p.name: p.data.copy() for p in plist}
    started = time.perf_counter()
    for epoch in range(epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            labels = np.array([train[i].label for i in batch], dtype=float)
            with nk.Tape() as tape:
                preds = [
                    nk.reshape(model.forward(train[i], mode="train", rng=rng), (1,))
                    for i in batch
                ]
                loss = nk.bce(nk.concat(preds), nk.constant(labels))
            if not np.isfinite(loss.data):
                raise DivergenceError("non-finite training loss")
            nk.backward(tape, loss)
            nk.adadelta_step(plist, rho=rho, eps=eps, lr=lr)
            epoch_loss += float(loss.data) * len(batch)
        row = {"epoch": epoch, "train_bce": epoch_loss / len(order)}
        if valid:
            scored = score_inputs(model, valid, split="valid")
            row["valid_auprc"] = auprc(scored.labels, scored.scores)
            if row["valid_auprc"] > best_auprc:
                best_auprc = row["valid_auprc"]
                best_epoch = epoch
                best_values = {p.name: p.data.copy() for p in plist}
        history.append(row)
    if valid:
        for p in plist:
            p.data[...] = best_values[p.name]
    else:
        best_epoch = epochs - 1
    metrics = {
        "variant": model.variant,
        "seed": seed,
        "epochs": epochs,
        "best_epoch": best_epoch,
        "auprc_valid": best_auprc if valid else None,
        "auprc_test": None,
        "nll_test": None,
        "wall_clock": time.perf_counter() - started,
    }
    if test:
        scored = score_inputs(model, test, split="test")
        metrics["auprc_test"] = auprc(scored.labels, scored.scores)
        metrics["nll_test"] = neg_log_likelihood(scored.labels, scored.scores)
        metrics["wall_clock"] = time.perf_counter() - started
    return TrainedPredictor(model=model, metrics=metrics, history=history)


def run_baseline(
    kind: str,
    inputs: dict[str, list[PatientInputs]],
    space: FeatureSpace,
    hyper: PredictorHyper,
    epochs: int = 50,
    batch_size: int = 100,
    seed: int = 0,
    rho: float = 0.95,
    eps: float = 1e-6,
    lr: float = 1.0,
) -> TrainedPredictor:
    """Train one of LR / MLP / RNN / BiRNN end to end."""
    if kind not in ("LR", "MLP", "RNN", "BiRNN"):
        raise ConfigError(f"run_baseline: unknown kind {kind!r}")
    model = init_model(kind, space, hyper, seed)
    return train_model(
        model, inputs, epochs=epochs, batch_size=batch_size, seed=seed,
        rho=rho, eps=eps, lr=lr,
    )
