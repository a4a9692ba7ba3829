"""Visit-sequence autoencoder: per-visit encoder, GRU bottleneck, decoders.

Encoder path, per visit: the concatenated feature vector scales the rows of
an embedding matrix, a linear map downsizes the feature axis, a single
single-head transformer block (no positional encoding, features are
unordered) mixes the downsized rows, and average pooling yields one visit
embedding. A GRU over the visit embeddings produces the patient embedding
from a zero initial state.

Decoder path: a GRU receives the patient embedding as its input at every
step, and four heads reconstruct each visit: softmax/cross-entropy over
count-normalized code and observation multi-hots, sigmoid/cross-entropy
for the race and gender one-hots, and squared error for the numeric tail.
The per-visit loss is the sum of the heads; the sequence loss is the mean
over visits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numkit as nk
from .ehr import FeatureSpace, VisitVector
from .errors import DimensionError, DivergenceError, ValidationError


@dataclass
class TransformerParams:
    """One encoder block with a single attention head."""

    w_q: nk.Param
    w_k: nk.Param
    w_v: nk.Param
    ln1_gain: nk.Param
    ln1_bias: nk.Param
    w_ff1: nk.Param
    b_ff1: nk.Param
    w_ff2: nk.Param
    b_ff2: nk.Param
    ln2_gain: nk.Param
    ln2_bias: nk.Param
    w_res: Optional[nk.Param] = None  # residual projection when d_z != d_emb
    dropout: float = 0.5

    def params(self) -> list[nk.Param]:
        out = [
            self.w_q, self.w_k, self.w_v,
            self.ln1_gain, self.ln1_bias,
            self.w_ff1, self.b_ff1, self.w_ff2, self.b_ff2,
            self.ln2_gain, self.ln2_bias,
        ]
        if self.w_res is not None:
            out.append(self.w_res)
        return out


@dataclass
class ReluVisitParams:
    """Fully-connected visit encoder used by the RACE variants."""

    w: nk.Param
    b: nk.Param

    def params(self) -> list[nk.Param]:
        return [self.w, self.b]


@dataclass
class EncoderParams:
    w_embed: nk.Param      # (n_features, d_z)
    w_downsize: nk.Param   # (downsized, n_features)
    visit: TransformerParams | ReluVisitParams
    rnn: nk.GRUParams      # input d_emb, hidden d_h

    def params(self) -> list[nk.Param]:
        return [self.w_embed, self.w_downsize] + self.visit.params() + self.rnn.params()

    @property
    def hidden_dim(self) -> int:
        return self.rnn.hidden_dim

    @property
    def kind(self) -> str:
        return "transformer" if isinstance(self.visit, TransformerParams) else "relu"


@dataclass
class DecoderParams:
    rnn: nk.GRUParams
    w_codes: nk.Param
    b_codes: nk.Param
    w_obs: nk.Param
    b_obs: nk.Param
    w_demo: nk.Param
    b_demo: nk.Param
    w_num: nk.Param
    b_num: nk.Param

    def params(self) -> list[nk.Param]:
        return self.rnn.params() + [
            self.w_codes, self.b_codes, self.w_obs, self.b_obs,
            self.w_demo, self.b_demo, self.w_num, self.b_num,
        ]


@dataclass
class AutoencoderParams:
    encoder: EncoderParams
    decoder: DecoderParams

    def params(self) -> list[nk.Param]:
        return self.encoder.params() + self.decoder.params()


@dataclass
class AutoencoderHyper:
    downsized_dim: int = 100
    embed_dim: int = 128          # d_z = d_emb = hidden size
    ff_dim: int = 0               # 0 means 4 * embed_dim
    dropout: float = 0.5
    visit_encoder: str = "transformer"

    @property
    def ff(self) -> int:
        return self.ff_dim or 4 * self.embed_dim


def init_encoder(
    n_features: int, hyper: AutoencoderHyper, rng: np.random.Generator
) -> EncoderParams:
    d = hyper.embed_dim

    def glorot(name, shape):
        return nk.Param(name, nk.glorot_uniform(rng, shape))

    w_embed = glorot("enc.embed", (n_features, d))
    w_downsize = glorot("enc.downsize", (hyper.downsized_dim, n_features))
    if hyper.visit_encoder == "transformer":
        visit = TransformerParams(
            w_q=glorot("enc.vis.w_q", (d, d)),
            w_k=glorot("enc.vis.w_k", (d, d)),
            w_v=glorot("enc.vis.w_v", (d, d)),
            ln1_gain=nk.Param("enc.vis.ln1_gain", np.ones(d)),
            ln1_bias=nk.Param("enc.vis.ln1_bias", np.zeros(d)),
            w_ff1=glorot("enc.vis.w_ff1", (d, hyper.ff)),
            b_ff1=nk.Param("enc.vis.b_ff1", np.zeros(hyper.ff)),
            w_ff2=glorot("enc.vis.w_ff2", (hyper.ff, d)),
            b_ff2=nk.Param("enc.vis.b_ff2", np.zeros(d)),
            ln2_gain=nk.Param("enc.vis.ln2_gain", np.ones(d)),
            ln2_bias=nk.Param("enc.vis.ln2_bias", np.zeros(d)),
            dropout=hyper.dropout,
        )
    elif hyper.visit_encoder == "relu":
        visit = ReluVisitParams(
            w=glorot("enc.vis.fc_w", (d, d)),
            b=nk.Param("enc.vis.fc_b", np.zeros(d)),
        )
    else:
        raise ValidationError(f"unknown visit encoder {hyper.visit_encoder!r}")
    rnn = nk.init_gru("enc.rnn", d, d, rng)
    return EncoderParams(w_embed=w_embed, w_downsize=w_downsize, visit=visit, rnn=rnn)


def init_autoencoder(
    space: FeatureSpace, hyper: AutoencoderHyper, rng: np.random.Generator
) -> AutoencoderParams:
    d = hyper.embed_dim
    encoder = init_encoder(space.dim, hyper, rng)

    def glorot(name, shape):
        return nk.Param(name, nk.glorot_uniform(rng, shape))

    decoder = DecoderParams(
        rnn=nk.init_gru("dec.rnn", d, d, rng),
        w_codes=glorot("dec.codes_w", (d, space.n_codes)),
        b_codes=nk.Param("dec.codes_b", np.zeros(space.n_codes)),
        w_obs=glorot("dec.obs_w", (d, max(space.n_observations, 1))),
        b_obs=nk.Param("dec.obs_b", np.zeros(max(space.n_observations, 1))),
        w_demo=glorot("dec.demo_w", (d, space.n_demographics)),
        b_demo=nk.Param("dec.demo_b", np.zeros(space.n_demographics)),
        w_num=glorot("dec.num_w", (d, 2)),
        b_num=nk.Param("dec.num_b", np.zeros(2)),
    )
    return AutoencoderParams(encoder=encoder, decoder=decoder)


# ---------------------------------------------------------------------------
# forward pieces


def embed_and_downsize(x_concat: np.ndarray, enc: EncoderParams) -> nk.Tensor:
    """Per-feature embedding then linear downsizing of the feature axis."""
    n = enc.w_embed.data.shape[0]
    if x_concat.shape != (n,):
        raise DimensionError(
            f"embed_and_downsize: visit vector {x_concat.shape} vs expected ({n},)"
        )
    z = nk.scale_rows(enc.w_embed, nk.constant(x_concat))
    return nk.matmul(enc.w_downsize, z)


def transformer_encode(
    z_tilde, vis: TransformerParams, mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[nk.Tensor, nk.Tensor]:
    """Single-head scaled dot-product block; returns (rows, attention).

    Attention rows are returned so they can be inspected and back-projected
    to the original feature space.
    """
    z_tilde = nk.as_tensor(z_tilde)
    d_emb = vis.w_q.data.shape[1]
    q = nk.matmul(z_tilde, vis.w_q)
    k = nk.matmul(z_tilde, vis.w_k)
    v = nk.matmul(z_tilde, vis.w_v)
    attn = nk.softmax_rows(nk.smul(nk.matmul(q, nk.transpose(k)), 1.0 / np.sqrt(d_emb)))
    mixed = nk.matmul(attn, v)
    resid = z_tilde if vis.w_res is None else nk.matmul(z_tilde, vis.w_res)
    s1 = nk.layer_norm_rows(nk.add(resid, mixed), vis.ln1_gain, vis.ln1_bias)
    ff = nk.add_rowvec(
        nk.matmul(nk.relu(nk.add_rowvec(nk.matmul(s1, vis.w_ff1), vis.b_ff1)), vis.w_ff2),
        vis.b_ff2,
    )
    if mode == "train" and vis.dropout > 0.0:
        if rng is None:
            raise ValidationError("transformer_encode: train mode needs an rng")
        ff = nk.dropout(ff, vis.dropout, "train", rng)
    x = nk.layer_norm_rows(nk.add(s1, ff), vis.ln2_gain, vis.ln2_bias)
    return x, attn


def visit_embedding(
    z_tilde, enc: EncoderParams, mode: str, rng: np.random.Generator | None
) -> tuple[nk.Tensor, Optional[nk.Tensor]]:
    """One visit's pooled embedding; attention comes back when available."""
    if isinstance(enc.visit, TransformerParams):
        x, attn = transformer_encode(z_tilde, enc.visit, mode, rng)
        return nk.mean_pool_rows(x), attn
    pooled = nk.mean_pool_rows(z_tilde)
    return nk.relu(nk.add(nk.matmul(pooled, enc.visit.w), enc.visit.b)), None


def pool_and_encode(xs: Sequence, enc: EncoderParams) -> tuple[list[nk.Tensor], nk.Tensor]:
    """Average-pool each visit's rows and run the encoder GRU over them."""
    if not xs:
        raise ValidationError("pool_and_encode: empty sequence")
    vs = [nk.mean_pool_rows(x) for x in xs]
    h = nk.constant(np.zeros(enc.hidden_dim))
    for v in vs:
        h = nk.gru_step(h, v, enc.rnn)
    return vs, h


@dataclass
class VisitEncoding:
    """Inspection record for one encoded visit."""

    z_tilde: np.ndarray
    x: Optional[np.ndarray]
    attention: Optional[np.ndarray]
    v: np.ndarray


@dataclass
class EncodeResult:
    patient_embedding: nk.Tensor
    visits: list[VisitEncoding] = field(default_factory=list)


def encode_sequence(
    vecs: Sequence[VisitVector],
    enc: EncoderParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    collect: bool = False,
) -> EncodeResult:
    """Run the full encoder over a visit sequence."""
    if not vecs:
        raise ValidationError("encode_sequence: empty sequence")
    details: list[VisitEncoding] = []
    h = nk.constant(np.zeros(enc.hidden_dim))
    for vec in vecs:
        z_tilde = embed_and_downsize(vec.concat, enc)
        v, attn = visit_embedding(z_tilde, enc, mode, rng)
        h = nk.gru_step(h, v, enc.rnn)
        if collect:
            details.append(
                VisitEncoding(
                    z_tilde=z_tilde.data.copy(),
                    x=None,
                    attention=None if attn is None else attn.data.copy(),
                    v=v.data.copy(),
                )
            )
    return EncodeResult(patient_embedding=h, visits=details)


def decode_and_loss(
    ep: nk.Tensor,
    targets: Sequence[VisitVector],
    dec: DecoderParams,
    space: FeatureSpace,
) -> tuple[nk.Tensor, dict[str, float]]:
    """Reconstruction loss: per-visit head sum, averaged over visits."""
    if not targets:
        raise ValidationError("decode_and_loss: empty target sequence")
    n_obs = space.n_observations
    n_demo = space.n_demographics
    total = None
    parts = {"codes": 0.0, "observations": 0.0, "demographics": 0.0, "numerics": 0.0}
    obs_visits = 0
    h = nk.constant(np.zeros(dec.rnn.hidden_dim))
    for vec in targets:
        h = nk.gru_step(h, ep, dec.rnn)
        visit_loss = None

        code_target = vec.x / vec.x.sum()
        l_codes = nk.ce_softmax(nk.add(nk.matmul(h, dec.w_codes), dec.b_codes), code_target)
        parts["codes"] += float(l_codes.data)
        visit_loss = l_codes

        if n_obs > 0:
            obs_target = vec.d[:n_obs]
            total_obs = obs_target.sum()
            if total_obs > 0:
                l_obs = nk.ce_softmax(
                    nk.add(nk.matmul(h, dec.w_obs), dec.b_obs), obs_target / total_obs
                )
                parts["observations"] += float(l_obs.data)
                obs_visits += 1
                visit_loss = nk.add(visit_loss, l_obs)

        demo_target = vec.d[n_obs : n_obs + n_demo]
        l_demo = nk.bce(
            nk.sigmoid(nk.add(nk.matmul(h, dec.w_demo), dec.b_demo)), demo_target
        )
        parts["demographics"] += float(l_demo.data)
        visit_loss = nk.add(visit_loss, l_demo)

        num_target = vec.d[n_obs + n_demo :]
        l_num = nk.mse(nk.add(nk.matmul(h, dec.w_num), dec.b_num), num_target)
        parts["numerics"] += float(l_num.data)
        visit_loss = nk.add(visit_loss, l_num)

        total = visit_loss if total is None else nk.add(total, visit_loss)
    t = len(targets)
    parts = {
        "codes": parts["codes"] / t,
        "observations": parts["observations"] / max(obs_visits, 1),
        "demographics": parts["demographics"] / t,
        "numerics": parts["numerics"] / t,
    }
    return nk.smul(total, 1.0 / t), parts


def reconstruction_loss(
    vecs: Sequence[VisitVector],
    params: AutoencoderParams,
    space: FeatureSpace,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[nk.Tensor, dict[str, float]]:
    """Encode a sequence and score its reconstruction."""
    result = encode_sequence(vecs, params.encoder, mode, rng)
    return decode_and_loss(result.patient_embedding, vecs, params.decoder, space)


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_values: dict[str, np.ndarray]


def _first_non_finite(params: Sequence[nk.Param]) -> str:
    for p in params:
        if not np.all(np.isfinite(p.data)):
            return p.name
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"{p.name}.grad"
    return "loss"


def _mean_valid_loss(sequences, params, space) -> float:
    total = 0.0
    for vecs in sequences:
        loss, _ = reconstruction_loss(vecs, params, space, mode="eval")
        total += float(loss.data)
    return total / max(len(sequences), 1)


def pretrain_autoencoder(
    train_sequences: Sequence[Sequence[VisitVector]],
    valid_sequences: Sequence[Sequence[VisitVector]],
    params: AutoencoderParams,
    space: FeatureSpace,
    epochs: int = 50,
    batch_size: int = 100,
    seed: int = 0,
    rho: float = 0.95,
    eps: float = 1e-6,
    lr: float = 1.0,
) -> TrainResult:
    """Minimize mean reconstruction loss with Adadelta.

    Tracks per-epoch train/validation losses and keeps a snapshot of the
    best-validation parameter values; the final values stay in ``params``.
    """
    if not train_sequences:
        raise ValidationError("pretrain_autoencoder: empty training set")
    plist = params.params()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 5)))
    history: list[dict] = []
    best_epoch = -1
    best_loss = np.inf
    best_values = {p.name: p.data.copy() for p in plist}
    order = np.arange(len(train_sequences))
    for epoch in range(epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        head_sums = {"codes": 0.0, "observations": 0.0, "demographics": 0.0, "numerics": 0.0}
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            with nk.Tape() as tape:
                total = None
                for i in batch:
                    li, parts = reconstruction_loss(
                        train_sequences[i], params, space, mode="train", rng=rng
                    )
                    total = li if total is None else nk.add(total, li)
                    for k in head_sums:
                        head_sums[k] += parts[k]
                total = nk.smul(total, 1.0 / len(batch))
            if not np.isfinite(total.data):
                raise DivergenceError(
                    f"non-finite training loss; first bad tensor: {_first_non_finite(plist)}"
                )
            nk.backward(tape, total)
            nk.adadelta_step(plist, rho=rho, eps=eps, lr=lr)
            epoch_loss += float(total.data) * len(batch)
        valid_loss = _mean_valid_loss(valid_sequences, params, space)
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / len(order),
            "valid_loss": valid_loss,
        }
        for k, s in head_sums.items():
            row[f"train_{k}"] = s / len(order)
        history.append(row)
        if valid_sequences and valid_loss < best_loss:
            best_loss = valid_loss
            best_epoch = epoch
            best_values = {p.name: p.data.copy() for p in plist}
    if not valid_sequences:
        best_epoch = epochs - 1
        best_values = {p.name: p.data.copy() for p in plist}
    return TrainResult(history=history, best_epoch=best_epoch, best_values=best_values)
