"""Deterministic float64 compute core with reverse-mode gradients."""

from .checkpoint import (
    checkpoint_exists,
    load_checkpoint,
    params_blob,
    params_sha256,
    restore,
    save_checkpoint,
)
from .fdcheck import FiniteDiffReport, finite_diff_check
from .ops import (
    GRUParams,
    activation,
    add,
    add_rowvec,
    asum,
    bce,
    ce_softmax,
    concat,
    constant,
    dropout,
    gru_step,
    init_gru,
    layer_norm_rows,
    loss,
    matmul,
    mean_pool_rows,
    mse,
    mul,
    neg,
    relu,
    reshape,
    scale_rows,
    sigmoid,
    smul,
    softmax_rows,
    stack_rows,
    sub,
    tanh,
    transpose,
)
from .optim import adadelta_step
from .tensor import (
    Param,
    Tape,
    Tensor,
    accumulate,
    active_tape,
    as_tensor,
    backward,
    glorot_uniform,
    record,
    zero_grads,
)

__all__ = [
    "FiniteDiffReport",
    "GRUParams",
    "Param",
    "Tape",
    "Tensor",
    "accumulate",
    "activation",
    "active_tape",
    "adadelta_step",
    "add",
    "add_rowvec",
    "as_tensor",
    "asum",
    "backward",
    "bce",
    "ce_softmax",
    "checkpoint_exists",
    "concat",
    "constant",
    "dropout",
    "finite_diff_check",
    "glorot_uniform",
    "gru_step",
    "init_gru",
    "layer_norm_rows",
    "load_checkpoint",
    "loss",
    "matmul",
    "mean_pool_rows",
    "mse",
    "mul",
    "neg",
    "params_blob",
    "params_sha256",
    "record",
    "relu",
    "reshape",
    "restore",
    "save_checkpoint",
    "scale_rows",
    "sigmoid",
    "smul",
    "softmax_rows",
    "stack_rows",
    "sub",
    "tanh",
    "transpose",
    "zero_grads",
]
