"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import GradTape, Tensor, backward, hadamard, sum_all


@dataclass
class GradSample:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if denom == 0 else abs(self.analytic - self.numeric) / denom


def relative_error(a: float, n: float, floor: float = 0.0) -> float:
    denom = max(abs(a), abs(n), floor)
    return 0.0 if denom == 0 else abs(a - n) / denom


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    samples: dict[str, list[tuple]] | None = None,
    step: float = 1e-5,
) -> list[GradSample]:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``samples`` maps parameter names to the element indices to probe; by
    default every element of every parameter is probed.  Perturbations are
    made in place on ``.data`` and undone afterwards.
    """
    with GradTape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss, params)
    if samples is None:
        samples = {name: list(np.ndindex(p.shape)) for name, p in params.items()}
    out = []
    for name, indices in samples.items():
        data = params[name].data
        for idx in indices:
            orig = data[idx]
            data[idx] = orig + step
            up = loss_fn().item()
            data[idx] = orig - step
            down = loss_fn().item()
            data[idx] = orig
            out.append(GradSample(name, tuple(int(i) for i in idx), float(grads[name][idx]), (up - down) / (2 * step)))
    return out


def sample_indices(params: dict[str, Tensor], per_param: int, rng: np.random.Generator) -> dict[str, list[tuple]]:
    """Up to ``per_param`` random element indices from every parameter."""
    out = {}
    for name, p in params.items():
        flat = rng.choice(p.data.size, size=min(per_param, p.data.size), replace=False)
        out[name] = [np.unravel_index(i, p.shape) for i in flat]
    return out


def check_op(op: Callable[..., Tensor], arrays: list[np.ndarray], rng: np.random.Generator, step: float = 1e-5,
             floor: float = 1e-5) -> float:
    """Max relative error of ``sum(op(*inputs) * R)`` for a fixed random R,
    probing every input element.

    The summed loss carries round-off of order eps * |loss| / step into every
    difference quotient, so gradients below ``floor`` are compared against
    ``floor`` rather than their own magnitude.
    """
    tensors = {str(i): Tensor(a, requires_grad=True) for i, a in enumerate(arrays)}
    probe = {}

    def loss_fn():
        out = op(*tensors.values())
        if "r" not in probe:
            probe["r"] = Tensor(rng.normal(size=out.shape))
        return sum_all(hadamard(out, probe["r"]))

    samples = check_gradients(loss_fn, tensors, step=step)
    return max((relative_error(s.analytic, s.numeric, floor) for s in samples), default=0.0)
