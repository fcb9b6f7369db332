"""Dense tensors over numpy storage with a tape-based reverse-mode differentiator.

Storage is a contiguous row-major numpy array.  Every differentiable primitive
records ``(output, inputs, adjoint)`` on the active :class:`GradTape`; the tape
is replayed in reverse by :func:`backward`.  Outside a tape nothing is
recorded, so inference carries no bookkeeping cost.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_dtype = contextvars.ContextVar("ssrstf_dtype", default=np.dtype(np.float32))
_active_tape = contextvars.ContextVar("ssrstf_tape", default=None)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def get_default_dtype() -> np.dtype:
    return _dtype.get()


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _dtype.set(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float width, e.g. ``precision("float64")``."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    token = _dtype.set(dtype)
    try:
        yield
    finally:
        _dtype.reset(token)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=get_default_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of executed primitives; consumed by one backward pass.

    Use as a context manager; operations executed inside the ``with`` block on
    tensors that require gradients are recorded.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "GradTape":
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


def apply_op(out: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable) -> Tensor:
    """Wrap ``out`` as a tensor and record it on the active tape.

    ``adjoint(grad_out)`` must return one gradient (or None) per input, each
    with that input's shape.
    """
    needs = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        tape = _active_tape.get()
        if tape is not None:
            tape.nodes.append((result, tuple(inputs), adjoint))
    return result


def backward(tape: GradTape, loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Replay ``tape`` in reverse from the scalar ``loss``.

    Leaf tensors that require gradients get their ``.grad`` slot filled.
    When ``params`` is given, each named tensor receives a gradient (zeros if
    unreachable) and the mapping name -> gradient is returned.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a backward pass")
    if tape._token is not None:
        raise TapeError("backward called while the tape is still recording")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {}
    for out, inputs, adjoint in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, ig in zip(inputs, adjoint(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            seen[key] = inp
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    tape.nodes = []
    # whatever is left in ``grads`` was never produced on this tape: a leaf
    for key, g in grads.items():
        if key in seen:
            seen[key].grad = np.asarray(g, dtype=seen[key].data.dtype)

    leaves = {}
    if params is not None:
        for name, p in params.items():
            g = grads.get(id(p))
            p.grad = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
            leaves[name] = p.grad
    return leaves


def grad_of(tape: GradTape, loss: Tensor, tensors: Sequence[Tensor]) -> list[np.ndarray]:
    named = backward(tape, loss, {str(i): t for i, t in enumerate(tensors)})
    return [named[str(i)] for i in range(len(tensors))]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return apply_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return apply_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return apply_op(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "hadamard")
    ad, bd = a.data, b.data

    def adjoint(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return apply_op(ad * bd, (a, b), adjoint)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return apply_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    y = (x * cdf).astype(x.dtype, copy=False)

    def adjoint(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return apply_op(y, (a,), adjoint)


# linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return apply_op(out, (a, b), adjoint)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(*lead, wd.shape[1])

    def adjoint(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return apply_op(out, inputs, adjoint)


# normalisations --------------------------------------------------------------


def softmax_last_axis(x: Tensor) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise FloatingPointError("softmax_last_axis: non-finite input")
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return apply_op(s, (x,), adjoint)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def adjoint(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply_op(out, (x, gamma, beta), adjoint)


# reductions ----------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return apply_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def norm_last_axis(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the subgradient at 0 is taken as 0."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=-1))

    def adjoint(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n[..., None] > 0, xd / safe[..., None], 0.0) * g[..., None],)

    return apply_op(n, (x,), adjoint)


# layout ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return apply_op(out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return apply_op(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat_last_axis(tensors: Iterable[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_last_axis: leading extents differ: {tensors[0].shape} vs {t.shape}")
    widths = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return apply_op(out, tensors, lambda g: tuple(np.split(g, widths, axis=-1)))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def adjoint(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return apply_op(np.ascontiguousarray(x.data[index]), (x,), adjoint)


def pad_axis(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    axis = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    n = x.shape[axis]
    index = [slice(None)] * x.ndim
    index[axis] = slice(before, before + n)
    index = tuple(index)
    return apply_op(np.pad(x.data, widths), (x,), lambda g: (np.ascontiguousarray(g[index]),))
