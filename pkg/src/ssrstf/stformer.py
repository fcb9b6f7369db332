"""Global stream: multi-head self-attention, spatio-temporal criss-cross
attention (STC) and the STFormer block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import MLPWeights, NormWeights, feed_forward, xavier, zeros
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_last_axis,
    linear,
    matmul,
    permute,
    reshape,
    scale,
    slice_axis,
    softmax_last_axis,
)


@dataclass
class MHSAWeights:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wp: Tensor
    bp: Tensor
    heads: int = 1

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, heads: int) -> "MHSAWeights":
        if width % heads:
            raise ValueError(f"{heads} heads do not divide width {width}")
        return cls(
            wq=xavier(rng, width, width), bq=zeros(width),
            wk=xavier(rng, width, width), bk=zeros(width),
            wv=xavier(rng, width, width), bv=zeros(width),
            wp=xavier(rng, width, width), bp=zeros(width),
            heads=heads,
        )


@dataclass
class STCWeights:
    spatial: MHSAWeights
    temporal: MHSAWeights
    w_mix: Tensor
    b_mix: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, heads: int) -> "STCWeights":
        if c % 2:
            raise ValueError(f"STC needs an even channel count, got {c}")
        half = c // 2
        return cls(MHSAWeights.init(rng, half, heads), MHSAWeights.init(rng, half, heads), xavier(rng, c, c), zeros(c))


@dataclass
class STBlockWeights:
    stc: STCWeights
    norm1: NormWeights
    norm2: NormWeights
    mlp: MLPWeights

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, heads: int, mlp_ratio: int = 4) -> "STBlockWeights":
        return cls(STCWeights.init(rng, c, heads), NormWeights.init(c), NormWeights.init(c), MLPWeights.init(rng, c, mlp_ratio))


def mhsa(tokens: Tensor, w: MHSAWeights, return_attention: bool = False):
    """Multi-head self-attention over (..., L, width) token sequences.

    Each head attends with scale 1/sqrt(d_K); heads are concatenated and
    mapped by the output projection.
    """
    *lead, length, width = tokens.shape
    h = w.heads
    if width % h:
        raise ShapeError(f"{h} heads do not divide token width {width}")
    if w.wq.shape != (width, width):
        raise ShapeError(f"MHSA projections are {w.wq.shape}, tokens have width {width}")
    dk = width // h
    n = int(np.prod(lead)) if lead else 1
    x = reshape(tokens, (n, length, width))

    def split_heads(t):
        return permute(reshape(t, (n, length, h, dk)), (0, 2, 1, 3))

    q = split_heads(linear(x, w.wq, w.bq))
    k = split_heads(linear(x, w.wk, w.bk))
    v = split_heads(linear(x, w.wv, w.bv))
    scores = scale(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    attn = softmax_last_axis(scores)
    heads = permute(matmul(attn, v), (0, 2, 1, 3))
    out = linear(reshape(heads, (n, length, width)), w.wp, w.bp)
    out = reshape(out, (*lead, length, width))
    return (out, attn) if return_attention else out


def stc(x: Tensor, w: STCWeights) -> Tensor:
    """Criss-cross attention on a (B, T, J, C) grid.

    The first channel half attends across joints within each frame, the
    second half across frames for each joint; the halves are concatenated
    and mixed by a C x C projection.
    """
    if x.ndim != 4:
        raise ShapeError(f"STC expects a (B, T, J, C) grid, got {x.shape}")
    b, t, j, c = x.shape
    if c % 2:
        raise ShapeError(f"STC needs an even channel count, got {c}")
    half = c // 2
    spatial = mhsa(slice_axis(x, -1, 0, half), w.spatial)
    temporal = permute(slice_axis(x, -1, half, c), (0, 2, 1, 3))
    temporal = permute(mhsa(temporal, w.temporal), (0, 2, 1, 3))
    return linear(concat_last_axis([spatial, temporal]), w.w_mix, w.b_mix)


def stformer_block(x: Tensor, w: STBlockWeights, literal_sigma: bool = True) -> Tensor:
    y = add(stc(w.norm1(x), w.stc), x)
    return add(feed_forward(w.norm2(y), w.mlp, literal_sigma), y)
