"""Depth-wise 1D convolutions along one grid axis, pointwise convolution, and
the large-kernel decomposition helpers.

Convention: cross-correlation (no kernel flip), odd kernels centred on the
output sample, zero padding so that every output extent equals its input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, apply_op, linear, pad_axis

TEMPORAL_AXIS = 1
JOINT_AXIS = 2
_AXES = {"temporal": TEMPORAL_AXIS, "joint": JOINT_AXIS}


@dataclass(frozen=True)
class Conv1DSpec:
    kernel_size: int
    dilation: int = 1
    axis: str = "temporal"

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.axis not in _AXES:
            raise ValueError(f"axis must be one of {sorted(_AXES)}, got {self.axis!r}")

    @property
    def grid_axis(self) -> int:
        return _AXES[self.axis]

    @property
    def half_reach(self) -> int:
        return (self.kernel_size - 1) // 2 * self.dilation


@dataclass(frozen=True)
class SSRAKernelSpec:
    """The ``{k1, d1, k2, d2}`` quadruple of an irregular large kernel.

    ``k1``/``d1`` describe the long axis; ``k2``/``d2`` the short axis, or
    ``None`` when the short-axis pair is dropped entirely.
    """

    k1: int
    d1: int
    k2: int | None = None
    d2: int | None = None

    def __post_init__(self):
        if (self.k2 is None) != (self.d2 is None):
            raise ValueError("k2 and d2 must both be given or both be absent")
        for k, d in self.pairs():
            if not k >= d >= 1:
                raise ValueError(f"need k >= d >= 1, got k={k}, d={d}")
            if (k // d) % 2 == 0:
                raise ValueError(f"floor(k/d) must be odd for a centred kernel, got k={k}, d={d}")

    def pairs(self) -> list[tuple[int, int]]:
        out = [(self.k1, self.d1)]
        if self.k2 is not None:
            out.append((self.k2, self.d2))
        return out

    @property
    def has_short_axis(self) -> bool:
        return self.k2 is not None

    def extents(self) -> tuple[int, int]:
        """Equivalent dense kernel shape (long, short); short is 1 when absent."""
        long = effective_extent(self.k1, self.d1)
        short = effective_extent(self.k2, self.d2) if self.has_short_axis else 1
        return long, short

    def to_list(self) -> list:
        return [self.k1, self.d1, self.k2, self.d2]

    @classmethod
    def from_list(cls, values: Sequence) -> "SSRAKernelSpec":
        values = list(values) + [None] * (4 - len(values))
        k1, d1, k2, d2 = values
        return cls(int(k1), int(d1), None if k2 is None else int(k2), None if d2 is None else int(d2))

    def __str__(self) -> str:
        k2 = "-" if self.k2 is None else self.k2
        d2 = "-" if self.d2 is None else self.d2
        return f"{{{self.k1},{self.d1},{k2},{d2}}}"


# kernel shapes compared in the ablation over SSRA kernels
ABLATION_SPECS = {
    "35x35": SSRAKernelSpec(35, 3, 35, 3),
    "35x11": SSRAKernelSpec(35, 3, 11, 2),
    "23x7": SSRAKernelSpec(23, 3, 7, 2),
    "11x11": SSRAKernelSpec(11, 2, 11, 2),
    "11x1": SSRAKernelSpec(11, 2),
}


def dw_size(d: int) -> int:
    return 2 * d - 1


def dwd_size(k: int, d: int) -> int:
    return k // d


def effective_extent(k: int, d: int) -> int:
    """Extent of the dense kernel equal to a (2d-1) kernel followed by a
    floor(k/d)-tap kernel at dilation d."""
    if not k >= d >= 1:
        raise ValueError(f"need k >= d >= 1, got k={k}, d={d}")
    return (2 * d - 1) + d * (k // d - 1)


def depthwise_conv1d(x: Tensor, w: Tensor, spec: Conv1DSpec) -> Tensor:
    """Per-channel cross-correlation along ``spec.axis`` of a (B, T, J, C) grid.

    ``y[i] = sum_j w[c, j] * x[i + (j - centre) * dilation]`` with zeros
    outside the grid.
    """
    axis = spec.grid_axis
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv1d expects a (B, T, J, C) grid, got {x.shape}")
    c = x.shape[-1]
    if w.shape != (c, spec.kernel_size):
        raise ShapeError(f"depthwise_conv1d: weights must be ({c}, {spec.kernel_size}), got {w.shape}")
    return _dwconv(x, w, spec.dilation, axis)


def _dwconv(x: Tensor, w: Tensor, dilation: int, axis: int, padded: bool = True) -> Tensor:
    """Depth-wise correlation along ``axis``.

    ``padded=True`` zero-pads for a same-size output; ``padded=False`` is the
    valid correlation, shorter by twice the kernel reach.
    """
    xd, wd = x.data, w.data
    k = wd.shape[1]
    reach = (k - 1) // 2 * dilation
    if padded:
        widths = [(0, 0)] * xd.ndim
        widths[axis] = (reach, reach)
        xp = np.pad(xd, widths)
    else:
        xp = xd
    n = xp.shape[axis] - 2 * reach
    if n < 1:
        raise ShapeError(f"valid correlation needs extent > {2 * reach} along axis {axis}, got {xp.shape[axis]}")

    def window(j):
        index = [slice(None)] * xd.ndim
        index[axis] = slice(j * dilation, j * dilation + n)
        return tuple(index)

    y = wd[:, 0] * xp[window(0)]
    for j in range(1, k):
        y += wd[:, j] * xp[window(j)]

    def adjoint(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[window(j)] += wd[:, j] * g
            if padded:
                crop = [slice(None)] * xd.ndim
                crop[axis] = slice(reach, reach + xd.shape[axis])
                gxp = np.ascontiguousarray(gxp[tuple(crop)])
            gx = gxp
        if w.requires_grad:
            c = g.shape[-1]
            g2 = g.reshape(-1, c)
            gw = np.stack([np.einsum("mc,mc->c", g2, xp[window(j)].reshape(-1, c)) for j in range(k)], axis=1)
        return gx, gw

    return apply_op(y, (x, w), adjoint)


def cascade_conv1d(x: Tensor, stages: Sequence[tuple[Tensor, Conv1DSpec]]) -> Tensor:
    """Apply several depth-wise 1D convolutions in sequence as one large kernel.

    The grid is zero-padded once by the total reach along each axis and every
    stage is then a valid correlation, so intermediate maps keep the values
    that lie past the border.  The result equals a single convolution with
    the composed dense kernel, boundary samples included.
    """
    if x.ndim != 4:
        raise ShapeError(f"cascade_conv1d expects a (B, T, J, C) grid, got {x.shape}")
    reach: dict[int, int] = {}
    for w, spec in stages:
        if w.shape != (x.shape[-1], spec.kernel_size):
            raise ShapeError(f"cascade_conv1d: weights must be ({x.shape[-1]}, {spec.kernel_size}), got {w.shape}")
        reach[spec.grid_axis] = reach.get(spec.grid_axis, 0) + spec.half_reach
    h = x
    for axis, r in reach.items():
        if r:
            h = pad_axis(h, axis, r, r)
    for w, spec in stages:
        h = _dwconv(h, w, spec.dilation, spec.grid_axis, padded=False)
    return h


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution: the same (C_in, C_out) map applied at every position."""
    if w.shape[0] != x.shape[-1]:
        raise ShapeError(f"pointwise_conv: input has {x.shape[-1]} channels, weight is {w.shape}")
    return linear(x, w, b)


def compose_dense_oracle(w_dw: np.ndarray, d_dw: int, w_dwd: np.ndarray, d_dwd: int) -> np.ndarray:
    """Dense per-channel kernel equivalent to ``w_dw`` (dilation ``d_dw``)
    followed by ``w_dwd`` (dilation ``d_dwd``).

    Both kernels are upsampled by their dilations and multiplied as
    polynomials.  Accepts (k,) or (C, k) arrays.
    """
    a = np.atleast_2d(np.asarray(w_dw, dtype=np.float64))
    b = np.atleast_2d(np.asarray(w_dwd, dtype=np.float64))
    for kern in (a, b):
        if kern.shape[1] % 2 == 0:
            raise ValueError(f"kernel length must be odd, got {kern.shape[1]}")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"channel counts differ: {a.shape[0]} vs {b.shape[0]}")
    a_up, b_up = _upsample(a, d_dw), _upsample(b, d_dwd)
    out = np.stack([np.convolve(ra, rb) for ra, rb in zip(a_up, b_up)])
    return out[0] if np.ndim(w_dw) == 1 else out


def _upsample(kern: np.ndarray, d: int) -> np.ndarray:
    c, k = kern.shape
    out = np.zeros((c, d * (k - 1) + 1))
    out[:, ::d] = kern
    return out
