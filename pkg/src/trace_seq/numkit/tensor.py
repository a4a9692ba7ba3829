"""Dense 64-bit arrays with a recording tape for reverse-mode gradients.

Every operation in :mod:`trace_seq.numkit.ops` produces a new ``Tensor``.
While a ``Tape`` is active, each produced tensor is appended to the tape
together with a closure that propagates its adjoint to its parents.
``backward`` walks the tape in exact reverse execution order, so gradient
accumulation is deterministic and bit-stable for identical inputs.

With no active tape, the same operations run forward-only (no recording,
no gradient bookkeeping), which is what inference uses.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import ContractError

_active_tape: Optional["Tape"] = None


class Tape:
    """Ordered record of executed operations for one forward pass."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return _active_tape


class Tensor:
    """A dense float64 array plus the adjoint bookkeeping for one tape."""

    __slots__ = ("data", "grad", "_backward")

    def __init__(self, data) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape})"

    # Arithmetic sugar; the implementations live in ops.py and are attached
    # there to avoid a circular import.


class Param(Tensor):
    """A named trainable tensor with Adadelta accumulator state.

    The accumulators hold running averages of squared gradients and squared
    updates; both start at zero and stay elementwise nonnegative.
    """

    __slots__ = ("name", "accum_grad_sq", "accum_update_sq")

    def __init__(self, name: str, value) -> None:
        super().__init__(np.array(value, dtype=np.float64))
        self.name = name
        self.accum_grad_sq = np.zeros_like(self.data)
        self.accum_update_sq = np.zeros_like(self.data)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Param({self.name!r}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add an adjoint contribution; fan-out sums additively."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def record(out: Tensor, backward: Callable[[np.ndarray], None]) -> Tensor:
    """Attach a backward closure and append to the active tape."""
    tape = _active_tape
    if tape is not None:
        out._backward = backward
        tape.nodes.append(out)
    return out


def backward(tape: Tape, output: Tensor) -> None:
    """Propagate d(output)/d(everything) through the tape, reversed.

    ``output`` must be a scalar recorded during this tape's forward pass.
    Gradients land on every tensor the output depends on; parameters keep
    theirs until the optimizer consumes and clears them.
    """
    if output.data.shape != ():
        raise ContractError(
            f"backward needs a scalar output, got shape {output.data.shape}"
        )
    if output.grad is None:
        output.grad = np.zeros(())
    output.grad += 1.0
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.grad = None


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Uniform init in +/- sqrt(6/(fan_in+fan_out)); 1-D shapes use extent."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        fan_in = fan_out = int(np.prod(shape))
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))
