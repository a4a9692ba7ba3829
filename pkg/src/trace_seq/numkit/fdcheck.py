"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from ..errors import ContractError
from .tensor import Param, Tape, Tensor, backward, zero_grads


@dataclass
class FiniteDiffReport:
    """Max relative gradient error per parameter tensor."""

    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Param],
    h: float = 1e-5,
    tol: float | None = None,
) -> FiniteDiffReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` takes no arguments, closes over ``params``, and must be
    deterministic (any dropout in eval mode or with a re-seeded mask). Two
    plain forward evaluations that disagree raise a contract error. The
    report holds, for each parameter, the maximum over elements of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    v1 = float(loss_fn().data)
    v2 = float(loss_fn().data)
    if v1 != v2:
        raise ContractError(
            f"loss closure is not deterministic: {v1!r} != {v2!r}"
        )

    zero_grads(params)
    with Tape() as tape:
        out = loss_fn()
    backward(tape, out)

    report = FiniteDiffReport()
    for p in params:
        analytic = p.grad if p.grad is not None else p.data * 0.0
        flat = p.data.reshape(-1)
        grad_flat = analytic.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn().data)
            flat[i] = orig - h
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, _rel_err(float(grad_flat[i]), numeric))
        report.per_param[p.name] = worst
    zero_grads(params)
    if tol is not None and report.max_rel_error > tol:
        name, err = report.worst()
        raise ContractError(
            f"gradient check failed: {name} has relative error {err:.3e} > {tol:.1e}"
        )
    return report
