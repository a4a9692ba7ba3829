"""Forward operators with reverse-mode adjoints.

Shapes are checked eagerly and failures name both operands. Only the shape
combinations the models need are supported; there is no generic
broadcasting. All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError, DimensionError, ValidationError
from .tensor import Param, Tensor, accumulate, active_tape, as_tensor, record

PROB_CLAMP = 1e-12
LAYER_NORM_EPS = 1e-5


def _shapes(*ts: Tensor) -> str:
    return " vs ".join(str(t.data.shape) for t in ts)


def constant(x) -> Tensor:
    """Wrap a value as a non-trainable leaf."""
    return as_tensor(x)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shape mismatch {_shapes(a, b)}")
    out = Tensor(a.data + b.data)
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(a, g)
        accumulate(b, g)

    return record(out, bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub: shape mismatch {_shapes(a, b)}")
    out = Tensor(a.data - b.data)
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(a, g)
        accumulate(b, -g)

    return record(out, bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(a, -g)

    return record(out, bwd)


def mul(a, b) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shape mismatch {_shapes(a, b)}")
    out = Tensor(a.data * b.data)
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)

    return record(out, bwd)


def smul(a, c: float) -> Tensor:
    """Multiply by a plain (non-differentiated) scalar constant."""
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(a, g * c)

    return record(out, bwd)


def add_rowvec(m, v) -> Tensor:
    """Add a length-c vector to every row of an r-by-c matrix."""
    m, v = as_tensor(m), as_tensor(v)
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise DimensionError(f"add_rowvec: shape mismatch {_shapes(m, v)}")
    out = Tensor(m.data + v.data[None, :])
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(m, g)
        accumulate(v, g.sum(axis=0))

    return record(out, bwd)


def asum(a) -> Tensor:
    """Sum of all elements, as a scalar."""
    a = as_tensor(a)
    out = Tensor(a.data.sum())
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(a, np.broadcast_to(g, a.data.shape))

    return record(out, bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix/vector product.

    Supported: (m,k)@(k,n) -> (m,n); (k,)@(k,n) -> (n,); (m,k)@(k,) -> (m,);
    (k,)@(k,) -> scalar dot product.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise DimensionError(f"matmul: ranks unsupported {_shapes(a, b)}")
    if ad.shape[-1] != (bd.shape[0] if bd.ndim >= 1 else -1):
        raise DimensionError(f"matmul: inner extents differ {_shapes(a, b)}")
    out = Tensor(ad @ bd)
    if active_tape() is None:
        return out

    def bwd(g):
        if ad.ndim == 2 and bd.ndim == 2:
            accumulate(a, g @ bd.T)
            accumulate(b, ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:
            accumulate(a, g @ bd.T)
            accumulate(b, np.outer(ad, g))
        elif ad.ndim == 2 and bd.ndim == 1:
            accumulate(a, np.outer(g, bd))
            accumulate(b, ad.T @ g)
        else:
            accumulate(a, g * bd)
            accumulate(b, g * ad)

    return record(out, bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: need a matrix, got {a.data.shape}")
    out = Tensor(a.data.T.copy())
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(a, g.T)

    return record(out, bwd)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise DimensionError(f"reshape: {a.data.shape} -> {shape} changes size")
    out = Tensor(a.data.reshape(shape))
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(a, g.reshape(a.data.shape))

    return record(out, bwd)


def concat(parts: Sequence) -> Tensor:
    """Concatenate 1-D tensors into one vector."""
    ts = [as_tensor(p) for p in parts]
    if not ts:
        raise DimensionError("concat: empty input")
    for t in ts:
        if t.data.ndim != 1:
            raise DimensionError(f"concat: need vectors, got shape {t.data.shape}")
    out = Tensor(np.concatenate([t.data for t in ts]))
    if active_tape() is None:
        return out
    sizes = [t.data.shape[0] for t in ts]

    def bwd(g):
        off = 0
        for t, n in zip(ts, sizes):
            accumulate(t, g[off : off + n])
            off += n

    return record(out, bwd)


def stack_rows(rows: Sequence) -> Tensor:
    """Stack equal-length vectors into a matrix, one per row."""
    ts = [as_tensor(r) for r in rows]
    if not ts:
        raise DimensionError("stack_rows: empty input")
    width = ts[0].data.shape
    for t in ts:
        if t.data.ndim != 1 or t.data.shape != width:
            raise DimensionError(f"stack_rows: ragged input {t.data.shape} vs {width}")
    out = Tensor(np.stack([t.data for t in ts]))
    if active_tape() is None:
        return out

    def bwd(g):
        for i, t in enumerate(ts):
            accumulate(t, g[i])

    return record(out, bwd)


def scale_rows(w, x) -> Tensor:
    """Scale row i of matrix ``w`` by scalar ``x[i]``.

    Realizes a per-feature embedding lookup: active features select and
    weight their embedding rows, absent (zero) features contribute nothing.
    """
    w, x = as_tensor(w), as_tensor(x)
    if w.data.ndim != 2 or x.data.ndim != 1 or w.data.shape[0] != x.data.shape[0]:
        raise DimensionError(f"scale_rows: shape mismatch {_shapes(w, x)}")
    out = Tensor(w.data * x.data[:, None])
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(w, g * x.data[:, None])
        accumulate(x, (g * w.data).sum(axis=1))

    return record(out, bwd)


def mean_pool_rows(x) -> Tensor:
    """Columnwise mean of a matrix, as a vector."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise DimensionError(f"mean_pool_rows: need a non-empty matrix, got {x.data.shape}")
    r = x.data.shape[0]
    out = Tensor(x.data.mean(axis=0))
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(x, np.broadcast_to(g / r, x.data.shape))

    return record(out, bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(x, g * out_data * (1.0 - out_data))

    return record(out, bwd)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.tanh(x.data)
    out = Tensor(out_data)
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(x, g * (1.0 - out_data * out_data))

    return record(out, bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)
    out = Tensor(out_data)
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(x, g * (x.data > 0.0))

    return record(out, bwd)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(kind: str, x) -> Tensor:
    """Apply a named elementwise activation: sigmoid, tanh, or relu."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation kind {kind!r}") from None
    return fn(x)


def softmax_rows(x) -> Tensor:
    """Row-stochastic softmax with max-subtraction for stability."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows: need a matrix, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)
    if active_tape() is None:
        return out

    def bwd(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        accumulate(x, s * (g - dot))

    return record(out, bwd)


def layer_norm_rows(x, gain, bias) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift.

    Uses the population variance and eps=1e-5 inside the square root.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.ndim != 2 or x.data.shape[1] < 2:
        raise DimensionError(f"layer_norm_rows: need >=2 columns, got {x.data.shape}")
    c = x.data.shape[1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise DimensionError(
            f"layer_norm_rows: gain/bias must be ({c},), got {_shapes(gain, bias)}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data[None, :] + bias.data[None, :])
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(bias, g.sum(axis=0))
        accumulate(gain, (g * xhat).sum(axis=0))
        gy = g * gain.data[None, :]
        m1 = gy.mean(axis=1, keepdims=True)
        m2 = (gy * xhat).mean(axis=1, keepdims=True)
        accumulate(x, inv * (gy - m1 - xhat * m2))

    return record(out, bwd)


def dropout(x, rate: float, mode: str, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: train mode zeroes and rescales, eval is identity."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout: unknown mode {mode!r}")
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout: rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if mode == "eval" or rate == 0.0:
        out = Tensor(x.data.copy())
        if active_tape() is None:
            return out

        def bwd_id(g):
            accumulate(x, g)

        return record(out, bwd_id)

    keep = rng.random(x.data.shape) >= rate
    scale = keep / (1.0 - rate)
    out = Tensor(x.data * scale)
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(x, g * scale)

    return record(out, bwd)


# ---------------------------------------------------------------------------
# losses (all reduce to a scalar)


def ce_softmax(pred, target) -> Tensor:
    """Cross entropy of a softmax over logits against a target distribution."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape or pred.data.ndim != 1:
        raise DimensionError(f"ce_softmax: need matching vectors, {_shapes(pred, target)}")
    t = target.data
    if np.any(t < -1e-12) or abs(t.sum() - 1.0) > 1e-8:
        raise ValidationError("ce_softmax: target must be a distribution summing to 1")
    z = pred.data
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    logp = z - lse
    out = Tensor(-(t * logp).sum())
    if active_tape() is None:
        return out
    s = np.exp(logp)

    def bwd(g):
        accumulate(pred, g * (s - t))
        accumulate(target, g * (-logp))

    return record(out, bwd)


def bce(pred, target) -> Tensor:
    """Mean binary cross entropy; probabilities clamped away from {0, 1}."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise DimensionError(f"bce: shape mismatch {_shapes(pred, target)}")
    t = target.data
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValidationError("bce: target values must lie in [0, 1]")
    p = np.clip(pred.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = max(p.size, 1)
    out = Tensor(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() / n)
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(pred, g * (p - t) / (p * (1.0 - p)) / n)
        accumulate(target, g * (np.log1p(-p) - np.log(p)) / n)

    return record(out, bwd)


def mse(pred, target) -> Tensor:
    """Mean squared error."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise DimensionError(f"mse: shape mismatch {_shapes(pred, target)}")
    diff = pred.data - target.data
    n = max(diff.size, 1)
    out = Tensor((diff * diff).sum() / n)
    if active_tape() is None:
        return out

    def bwd(g):
        accumulate(pred, g * 2.0 * diff / n)
        accumulate(target, g * (-2.0) * diff / n)

    return record(out, bwd)


_LOSSES = {"ce_softmax": ce_softmax, "bce": bce, "mse": mse}


def loss(kind: str, pred, target) -> Tensor:
    """Dispatch to a named loss: ce_softmax, bce, or mse."""
    try:
        fn = _LOSSES[kind]
    except KeyError:
        raise ConfigError(f"unknown loss kind {kind!r}") from None
    return fn(pred, target)


# ---------------------------------------------------------------------------
# gated recurrent cell


@dataclass
class GRUParams:
    """Weights for one gated recurrent cell (shared layout everywhere)."""

    w_ir: Param
    w_iz: Param
    w_in: Param
    w_hr: Param
    w_hz: Param
    w_hn: Param
    b_r: Param
    b_z: Param
    b_n: Param

    def params(self) -> list[Param]:
        return [
            self.w_ir, self.w_iz, self.w_in,
            self.w_hr, self.w_hz, self.w_hn,
            self.b_r, self.b_z, self.b_n,
        ]

    @property
    def hidden_dim(self) -> int:
        return self.w_hr.data.shape[0]


def init_gru(prefix: str, d_in: int, d_h: int, rng: np.random.Generator) -> GRUParams:
    from .tensor import glorot_uniform

    def w(name, shape):
        return Param(f"{prefix}.{name}", glorot_uniform(rng, shape))

    def b(name):
        return Param(f"{prefix}.{name}", np.zeros(d_h))

    return GRUParams(
        w_ir=w("w_ir", (d_in, d_h)), w_iz=w("w_iz", (d_in, d_h)), w_in=w("w_in", (d_in, d_h)),
        w_hr=w("w_hr", (d_h, d_h)), w_hz=w("w_hz", (d_h, d_h)), w_hn=w("w_hn", (d_h, d_h)),
        b_r=b("b_r"), b_z=b("b_z"), b_n=b("b_n"),
    )


def gru_step(state, inp, params: GRUParams) -> Tensor:
    """One gated recurrent update.

    reset r = sigmoid(x Wir + h Whr + br)
    update z = sigmoid(x Wiz + h Whz + bz)
    candidate n = tanh(x Win + r * (h Whn) + bn)
    new state = (1 - z) * h + z * n, so a saturated update gate hands the
    state over to the candidate.
    """
    state, inp = as_tensor(state), as_tensor(inp)
    d_h = params.hidden_dim
    d_in = params.w_ir.data.shape[0]
    if state.data.shape != (d_h,) or inp.data.shape != (d_in,):
        raise DimensionError(
            f"gru_step: state {state.data.shape} / input {inp.data.shape} "
            f"do not match cell dims (in={d_in}, hidden={d_h})"
        )
    r = sigmoid(add(add(matmul(inp, params.w_ir), matmul(state, params.w_hr)), params.b_r))
    z = sigmoid(add(add(matmul(inp, params.w_iz), matmul(state, params.w_hz)), params.b_z))
    n = tanh(add(add(matmul(inp, params.w_in), mul(r, matmul(state, params.w_hn))), params.b_n))
    return add(sub(state, mul(z, state)), mul(z, n))


# attach arithmetic sugar to Tensor
Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__neg__ = lambda self: neg(self)
