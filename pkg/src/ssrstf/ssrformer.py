"""Local stream: skeleton selective refine attention (SSRA), the SSR token
mixer and the spatial / temporal SSRFormer blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import (
    JOINT_AXIS,
    TEMPORAL_AXIS,
    Conv1DSpec,
    SSRAKernelSpec,
    cascade_conv1d,
    dw_size,
    dwd_size,
    pointwise_conv,
)
from .layers import MLPWeights, NormWeights, feed_forward, xavier, zeros
from .tensor import ShapeError, Tensor, add, gelu, hadamard

SPATIAL = "spatial"
TEMPORAL = "temporal"

_LONG_AXIS = {SPATIAL: JOINT_AXIS, TEMPORAL: TEMPORAL_AXIS}
_AXIS_NAME = {JOINT_AXIS: "joint", TEMPORAL_AXIS: "temporal"}


def long_short_axes(orientation: str) -> tuple[str, str]:
    """Grid axis names carrying the long (k1) and short (k2) kernel sides."""
    if orientation not in _LONG_AXIS:
        raise ValueError(f"orientation must be 'spatial' or 'temporal', got {orientation!r}")
    long = _LONG_AXIS[orientation]
    short = TEMPORAL_AXIS if long == JOINT_AXIS else JOINT_AXIS
    return _AXIS_NAME[long], _AXIS_NAME[short]


@dataclass
class SSRAWeights:
    w_dw1: Tensor
    w_dwd1: Tensor
    w_a: Tensor
    b_a: Tensor
    w_dw2: Tensor | None = None
    w_dwd2: Tensor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, spec: SSRAKernelSpec) -> "SSRAWeights":
        def kernel(size):
            return xavier(rng, size, size, shape=(c, size))

        w = cls(
            w_dw1=kernel(dw_size(spec.d1)),
            w_dwd1=kernel(dwd_size(spec.k1, spec.d1)),
            w_a=xavier(rng, c, c),
            b_a=zeros(c),
        )
        if spec.has_short_axis:
            w.w_dw2 = kernel(dw_size(spec.d2))
            w.w_dwd2 = kernel(dwd_size(spec.k2, spec.d2))
        return w

    def check(self, spec: SSRAKernelSpec) -> None:
        if spec.has_short_axis != (self.w_dw2 is not None and self.w_dwd2 is not None):
            raise ShapeError(f"SSRA weights do not match kernel spec {spec}: short-axis kernels mismatched")
        c = self.w_a.shape[0]
        groups = [self.w_dw1, self.w_dwd1, self.w_dw2, self.w_dwd2]
        if any(g is not None and g.shape[0] != c for g in groups) or self.w_a.shape != (c, c):
            raise ShapeError("SSRA weights disagree on the channel count")


@dataclass
class SSRBlockWeights:
    ssra: SSRAWeights
    pw_in_w: Tensor
    pw_in_b: Tensor
    pw_out_w: Tensor
    pw_out_b: Tensor
    norm1: NormWeights
    norm2: NormWeights
    mlp: MLPWeights

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, spec: SSRAKernelSpec, mlp_ratio: int = 4) -> "SSRBlockWeights":
        return cls(
            ssra=SSRAWeights.init(rng, c, spec),
            pw_in_w=xavier(rng, c, c),
            pw_in_b=zeros(c),
            pw_out_w=xavier(rng, c, c),
            pw_out_b=zeros(c),
            norm1=NormWeights.init(c),
            norm2=NormWeights.init(c),
            mlp=MLPWeights.init(rng, c, mlp_ratio),
        )


def conv_stages(w: SSRAWeights, spec: SSRAKernelSpec, orientation: str) -> list[tuple[Tensor, Conv1DSpec]]:
    """DW1, DW2, DWD1, DWD2 in application order (short-axis pair optional)."""
    long, short = long_short_axes(orientation)
    stages = [(w.w_dw1, Conv1DSpec(dw_size(spec.d1), 1, long))]
    if spec.has_short_axis:
        stages.append((w.w_dw2, Conv1DSpec(dw_size(spec.d2), 1, short)))
    stages.append((w.w_dwd1, Conv1DSpec(dwd_size(spec.k1, spec.d1), spec.d1, long)))
    if spec.has_short_axis:
        stages.append((w.w_dwd2, Conv1DSpec(dwd_size(spec.k2, spec.d2), spec.d2, short)))
    return stages


def ssra_aggregate(x: Tensor, w: SSRAWeights, spec: SSRAKernelSpec, orientation: str) -> Tensor:
    """The large-kernel depth-wise aggregate fed to the attention projection."""
    if x.ndim != 4:
        raise ShapeError(f"SSRA expects a (B, T, J, C) grid, got {x.shape}")
    w.check(spec)
    return cascade_conv1d(x, conv_stages(w, spec, orientation))


def ssra(x: Tensor, w: SSRAWeights, spec: SSRAKernelSpec, orientation: str) -> Tensor:
    attention = pointwise_conv(ssra_aggregate(x, w, spec, orientation), w.w_a, w.b_a)
    return hadamard(attention, x)


def ssr_module(x: Tensor, w: SSRBlockWeights, spec: SSRAKernelSpec, orientation: str) -> Tensor:
    h = gelu(pointwise_conv(x, w.pw_in_w, w.pw_in_b))
    h = ssra(h, w.ssra, spec, orientation)
    return add(x, pointwise_conv(h, w.pw_out_w, w.pw_out_b))


def ssrformer_block(
    x: Tensor,
    w: SSRBlockWeights,
    spec: SSRAKernelSpec,
    orientation: str,
    literal_sigma: bool = True,
) -> Tensor:
    y = add(ssr_module(w.norm1(x), w, spec, orientation), x)
    return add(feed_forward(w.norm2(y), w.mlp, literal_sigma), y)
