"""Full SSR-STF lifting network: embedding, dual-stream blocks with adaptive
fusion, motion representation, regression head, and the training losses."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .conv import SSRAKernelSpec, dw_size, dwd_size
from .layers import named_parameters, param, xavier, zeros
from .ssrformer import SPATIAL, TEMPORAL, SSRBlockWeights, ssrformer_block
from .stformer import STBlockWeights, stformer_block
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat_last_axis,
    hadamard,
    linear,
    norm_last_axis,
    scale,
    slice_axis,
    softmax_last_axis,
    sub,
    sum_all,
    tanh,
)

REDUCTIONS = ("mean", "sum")
LOCAL_ORDERS = ("spatial_first", "temporal_first")


@dataclass
class ModelConfig:
    depth: int = 12
    channels: int = 256
    motion_channels: int = 512
    frames: int = 243
    joints: int = 17
    kernel: SSRAKernelSpec = field(default_factory=lambda: SSRAKernelSpec(35, 3, 11, 2))
    heads: int = 8
    mlp_ratio: int = 4
    lambda_delta: float = 1.0
    literal_sigma: bool = True
    reduction: str = "mean"
    # regression head output is multiplied by this to give millimetres
    output_scale_mm: float = 1000.0
    local_order: str = "spatial_first"

    def __post_init__(self):
        if isinstance(self.kernel, (list, tuple)):
            self.kernel = SSRAKernelSpec.from_list(self.kernel)

    def validate(self) -> list[str]:
        problems = []
        if self.depth < 1:
            problems.append(f"depth must be >= 1, got {self.depth}")
        if self.channels < 2 or self.channels % 2:
            problems.append(f"channels must be even and >= 2, got {self.channels}")
        elif (self.channels // 2) % self.heads:
            problems.append(f"heads={self.heads} must divide channels/2={self.channels // 2}")
        if self.heads < 1:
            problems.append(f"heads must be >= 1, got {self.heads}")
        if self.motion_channels < 1:
            problems.append(f"motion_channels must be >= 1, got {self.motion_channels}")
        if self.frames < 1:
            problems.append(f"frames must be >= 1, got {self.frames}")
        if self.joints < 2:
            problems.append(f"joints must be >= 2, got {self.joints}")
        if self.mlp_ratio < 1:
            problems.append(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.lambda_delta < 0:
            problems.append(f"lambda_delta must be >= 0, got {self.lambda_delta}")
        if self.reduction not in REDUCTIONS:
            problems.append(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.local_order not in LOCAL_ORDERS:
            problems.append(f"local_order must be one of {LOCAL_ORDERS}, got {self.local_order!r}")
        if self.output_scale_mm <= 0:
            problems.append(f"output_scale_mm must be positive, got {self.output_scale_mm}")
        return problems

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kernel"] = self.kernel.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        return cls(**d)


PRESETS = {
    "base": dict(depth=12, channels=256, motion_channels=512, heads=8),
    "small": dict(depth=16, channels=128, motion_channels=512, heads=4),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


@dataclass
class BlockWeights:
    ssr_spatial: SSRBlockWeights
    ssr_temporal: SSRBlockWeights
    st1: STBlockWeights
    st2: STBlockWeights
    fusion_w: Tensor
    fusion_b: Tensor


@dataclass
class ModelWeights:
    embed_w: Tensor
    embed_b: Tensor
    pos: Tensor
    blocks: list[BlockWeights]
    rep_w: Tensor
    rep_b: Tensor
    head_w: Tensor
    head_b: Tensor

    def named(self) -> dict[str, Tensor]:
        return dict(named_parameters(self))


def init_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Xavier-uniform linear and kernel weights, zero biases, unit norms,
    positional encoding ~ N(0, 0.02)."""
    problems = config.validate()
    if problems:
        raise ValueError("invalid model config: " + "; ".join(problems))
    rng = np.random.default_rng(seed)
    c, ch = config.channels, config.motion_channels
    weights = ModelWeights(
        embed_w=xavier(rng, 3, c),
        embed_b=zeros(c),
        pos=param(rng.normal(0.0, 0.02, size=(1, config.joints, c))),
        blocks=[],
        rep_w=None,
        rep_b=None,
        head_w=None,
        head_b=None,
    )
    for _ in range(config.depth):
        weights.blocks.append(
            BlockWeights(
                ssr_spatial=SSRBlockWeights.init(rng, c, config.kernel, config.mlp_ratio),
                ssr_temporal=SSRBlockWeights.init(rng, c, config.kernel, config.mlp_ratio),
                st1=STBlockWeights.init(rng, c, config.heads, config.mlp_ratio),
                st2=STBlockWeights.init(rng, c, config.heads, config.mlp_ratio),
                fusion_w=xavier(rng, 2 * c, 2),
                fusion_b=zeros(2),
            )
        )
    weights.rep_w, weights.rep_b = xavier(rng, c, ch), zeros(ch)
    weights.head_w, weights.head_b = xavier(rng, ch, 3), zeros(3)
    return weights


# parameter census ------------------------------------------------------------------


def _ssr_shapes(c: int, spec: SSRAKernelSpec, r: int) -> dict[str, tuple]:
    s = {
        "ssra.w_dw1": (c, dw_size(spec.d1)),
        "ssra.w_dwd1": (c, dwd_size(spec.k1, spec.d1)),
        "ssra.w_a": (c, c),
        "ssra.b_a": (c,),
    }
    if spec.has_short_axis:
        s["ssra.w_dw2"] = (c, dw_size(spec.d2))
        s["ssra.w_dwd2"] = (c, dwd_size(spec.k2, spec.d2))
    s.update({"pw_in_w": (c, c), "pw_in_b": (c,), "pw_out_w": (c, c), "pw_out_b": (c,)})
    s.update(_norm_mlp_shapes(c, r))
    return s


def _norm_mlp_shapes(c: int, r: int) -> dict[str, tuple]:
    return {
        "norm1.gamma": (c,), "norm1.beta": (c,), "norm2.gamma": (c,), "norm2.beta": (c,),
        "mlp.w1": (c, r * c), "mlp.b1": (r * c,), "mlp.w2": (r * c, c), "mlp.b2": (c,),
    }


def _st_shapes(c: int, r: int) -> dict[str, tuple]:
    half = c // 2
    s = {}
    for branch in ("spatial", "temporal"):
        for p in ("q", "k", "v", "p"):
            s[f"stc.{branch}.w{p}"] = (half, half)
            s[f"stc.{branch}.b{p}"] = (half,)
    s.update({"stc.w_mix": (c, c), "stc.b_mix": (c,)})
    s.update(_norm_mlp_shapes(c, r))
    return s


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Name -> shape of every parameter, computed from the config alone."""
    c, ch, r = config.channels, config.motion_channels, config.mlp_ratio
    shapes = {"embed_w": (3, c), "embed_b": (c,), "pos": (1, config.joints, c)}
    ssr, st = _ssr_shapes(c, config.kernel, r), _st_shapes(c, r)
    for i in range(config.depth):
        for part, table in (("ssr_spatial", ssr), ("ssr_temporal", ssr), ("st1", st), ("st2", st)):
            for name, shape in table.items():
                shapes[f"blocks.{i}.{part}.{name}"] = shape
        shapes[f"blocks.{i}.fusion_w"] = (2 * c, 2)
        shapes[f"blocks.{i}.fusion_b"] = (2,)
    shapes.update({"rep_w": (c, ch), "rep_b": (ch,), "head_w": (ch, 3), "head_b": (3,)})
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    """Scalar counts grouped by module (embedding, each stream, fusion, heads)."""
    groups: dict[str, int] = {}
    for name, shape in parameter_shapes(config).items():
        parts = name.split(".")
        if parts[0] == "blocks":
            key = {"ssr_spatial": "local_stream", "ssr_temporal": "local_stream", "st1": "global_stream",
                   "st2": "global_stream"}.get(parts[2], "fusion")
        else:
            key = {"embed_w": "embedding", "embed_b": "embedding", "pos": "embedding", "rep_w": "motion_representation",
                   "rep_b": "motion_representation"}.get(parts[0], "regression_head")
        groups[key] = groups.get(key, 0) + int(np.prod(shape))
    return groups


def check_weights(config: ModelConfig, weights: ModelWeights) -> None:
    expected = parameter_shapes(config)
    actual = weights.named()
    for name, shape in expected.items():
        if name not in actual:
            raise ShapeError(f"weights do not match config: missing parameter {name!r}")
        if actual[name].shape != shape:
            raise ShapeError(f"weights do not match config: parameter {name!r} has shape "
                             f"{actual[name].shape}, expected {shape}")
    extra = [n for n in actual if n not in expected]
    if extra:
        raise ShapeError(f"weights do not match config: unexpected parameter {extra[0]!r}")


# forward ------------------------------------------------------------------------------


def embed(x2d: Tensor, weights: ModelWeights) -> Tensor:
    x2d = as_tensor(x2d)
    if x2d.ndim != 4 or x2d.shape[-1] != 3:
        raise ShapeError(f"input must be (B, T, J, 3) with (u, v, confidence), got {x2d.shape}")
    if x2d.shape[2] != weights.pos.shape[1]:
        raise ShapeError(f"input has {x2d.shape[2]} joints, positional encoding has {weights.pos.shape[1]}")
    return add(linear(x2d, weights.embed_w, weights.embed_b), weights.pos)


def fusion_weights(f_local: Tensor, f_global: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Per-position (alpha_L, alpha_G), each (B, T, J, 1), summing to one."""
    alpha = softmax_last_axis(linear(concat_last_axis([f_local, f_global]), w, b))
    return slice_axis(alpha, -1, 0, 1), slice_axis(alpha, -1, 1, 2)


def local_stream(f: Tensor, block: BlockWeights, config: ModelConfig) -> Tensor:
    order = [(block.ssr_spatial, SPATIAL), (block.ssr_temporal, TEMPORAL)]
    if config.local_order == "temporal_first":
        order.reverse()
    for w, orientation in order:
        f = ssrformer_block(f, w, config.kernel, orientation, config.literal_sigma)
    return f


def global_stream(f: Tensor, block: BlockWeights, config: ModelConfig) -> Tensor:
    f = stformer_block(f, block.st1, config.literal_sigma)
    return stformer_block(f, block.st2, config.literal_sigma)


def dual_stream_block(f: Tensor, block: BlockWeights, config: ModelConfig) -> Tensor:
    f_local = local_stream(f, block, config)
    f_global = global_stream(f, block, config)
    a_local, a_global = fusion_weights(f_local, f_global, block.fusion_w, block.fusion_b)
    return add(hadamard(a_local, f_local), hadamard(a_global, f_global))


def forward(x2d, weights: ModelWeights, config: ModelConfig, check: bool = True) -> tuple[Tensor, Tensor]:
    """Returns the motion representation E (B, T, J, C_h) and the 3D pose in mm."""
    if check:
        check_weights(config, weights)
    f = embed(x2d, weights)
    for block in weights.blocks:
        f = dual_stream_block(f, block, config)
    motion = tanh(linear(f, weights.rep_w, weights.rep_b))
    pose = scale(linear(motion, weights.head_w, weights.head_b), config.output_scale_mm)
    return motion, pose


# losses ----------------------------------------------------------------------------------


@dataclass
class LossValues:
    position: Tensor
    velocity: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {"l_p": self.position.item(), "l_delta": self.velocity.item(), "total": self.total.item()}


def _check_pair(pred: Tensor, gt: Tensor) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    if pred.ndim != 4 or pred.shape[-1] != 3:
        raise ShapeError(f"poses must be (B, T, J, 3), got {pred.shape}")


def loss_position(pred, gt, reduction: str = "mean") -> Tensor:
    pred, gt = as_tensor(pred), as_tensor(gt)
    _check_pair(pred, gt)
    total = sum_all(norm_last_axis(sub(pred, gt)))
    if reduction == "sum":
        return total
    b, t, j, _ = pred.shape
    return scale(total, 1.0 / (b * t * j))


def loss_velocity(pred, gt, reduction: str = "mean") -> Tensor:
    pred, gt = as_tensor(pred), as_tensor(gt)
    _check_pair(pred, gt)
    b, t, j, _ = pred.shape
    if t < 2:
        return Tensor(0.0)

    def delta(x):
        return sub(slice_axis(x, 1, 1, t), slice_axis(x, 1, 0, t - 1))

    total = sum_all(norm_last_axis(sub(delta(pred), delta(gt))))
    if reduction == "sum":
        return total
    return scale(total, 1.0 / (b * (t - 1) * j))


def loss_total(pred, gt, lambda_delta: float = 1.0, reduction: str = "mean") -> LossValues:
    if lambda_delta < 0:
        raise ValueError(f"lambda_delta must be non-negative, got {lambda_delta}")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    lp = loss_position(pred, gt, reduction)
    lv = loss_velocity(pred, gt, reduction)
    return LossValues(lp, lv, add(lp, scale(lv, lambda_delta)))
