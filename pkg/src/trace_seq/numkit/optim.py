"""Adadelta parameter updates."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from ..errors import ConfigError, ContractError
from .tensor import Param


def adadelta_step(
    params: Iterable[Param],
    rho: float = 0.95,
    eps: float = 1e-6,
    lr: float = 1.0,
) -> None:
    """Apply one Adadelta update to every parameter, then clear gradients.

    Per element:
        Eg2  <- rho * Eg2 + (1 - rho) * g^2
        delta = -sqrt(Ed2 + eps) / sqrt(Eg2 + eps) * g
        value <- value + lr * delta
        Ed2  <- rho * Ed2 + (1 - rho) * delta^2
    """
    if not (0.0 < rho < 1.0):
        raise ConfigError(f"adadelta: rho must be in (0, 1), got {rho}")
    for p in params:
        if p.grad is None:
            raise ContractError(f"adadelta: parameter {p.name!r} has no gradient")
        g = p.grad
        p.accum_grad_sq *= rho
        p.accum_grad_sq += (1.0 - rho) * g * g
        delta = -np.sqrt(p.accum_update_sq + eps) / np.sqrt(p.accum_grad_sq + eps) * g
        p.data += lr * delta
        p.accum_update_sq *= rho
        p.accum_update_sq += (1.0 - rho) * delta * delta
        p.grad = None
