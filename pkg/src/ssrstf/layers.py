"""Parameter containers and the small building blocks shared by both streams."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Tensor, gelu, layer_norm, linear


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-bound, bound, size=shape or (fan_in, fan_out)))


def zeros(*shape: int) -> Tensor:
    return param(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return param(np.ones(shape))


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk nested dataclasses / lists yielding ``(dotted_name, tensor)``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is not None:
                yield from named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from named_parameters(value, f"{prefix}.{i}" if prefix else str(i))


@dataclass
class NormWeights:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, c: int) -> "NormWeights":
        return cls(ones(c), zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


@dataclass
class MLPWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, ratio: int) -> "MLPWeights":
        hidden = ratio * c
        return cls(xavier(rng, c, hidden), zeros(hidden), xavier(rng, hidden, c), zeros(c))


def mlp(x: Tensor, w: MLPWeights) -> Tensor:
    return linear(gelu(linear(x, w.w1, w.b1)), w.w2, w.b2)


def feed_forward(x: Tensor, w: MLPWeights, literal_sigma: bool) -> Tensor:
    """The MLP branch of a MetaFormer block.

    With ``literal_sigma`` a GELU is applied on top of the MLP output,
    i.e. ``gelu(MLP(x))``; otherwise the plain Linear-GELU-Linear MLP.
    """
    h = mlp(x, w)
    return gelu(h) if literal_sigma else h
