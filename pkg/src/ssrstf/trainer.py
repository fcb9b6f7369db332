"""AdamW with per-epoch exponential learning-rate decay, the epoch loop, and
trainer checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import load_model, save_model
from .data import DatasetManifest, PoseClip, batch_iterator
from .model import ModelConfig, ModelWeights, forward, init_weights, loss_total
from .tensor import GradTape, Tensor, backward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 90
    batch_size: int = 12
    lr: float = 6e-4
    lr_decay: float = 0.99
    # the settings below are not reported for the original recipe
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_split: str | None = None

    def validate(self) -> list[str]:
        problems = []
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            problems.append(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            problems.append(f"clip_norm must be positive or null, got {self.clip_norm}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("beta1 and beta2 must lie in [0, 1)")
        return problems

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown train config keys: {unknown}")
        return cls(**d)


def lr_at(epoch: int, lr0: float = 6e-4, decay: float = 0.99) -> float:
    return lr0 * decay ** epoch


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def decays(name: str, p: Tensor) -> bool:
    """Weight decay applies to matrices and kernels, not to biases, norm
    parameters or the positional encoding."""
    return p.ndim >= 2 and name != "pos"


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState, lr: float,
               weight_decay: float = 0.0) -> None:
    """In-place decoupled-weight-decay Adam update of every parameter in ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if weight_decay and decays(name, p):
            p.data *= p.data.dtype.type(1.0 - lr * weight_decay)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for name in grads:
            grads[name] = grads[name] * grads[name].dtype.type(factor)
    return norm


@dataclass
class TrainerState:
    weights: ModelWeights
    optimizer: AdamWState
    epoch: int = 0  # epochs completed
    rng_state: dict | None = None


@dataclass
class TrainResult:
    state: TrainerState
    history: list[dict]


def predict_clip(x2d: PoseClip, weights: ModelWeights, config: ModelConfig) -> np.ndarray:
    """3D pose (T, J, 3) in mm for a whole clip, no tape recorded."""
    _, pose = forward(Tensor(x2d.values[None]), weights, config)
    return pose.data[0]


def evaluate_pairs(pairs: list[tuple[PoseClip, PoseClip]], weights: ModelWeights, config: ModelConfig) -> float:
    errors = [metrics.mpjpe(predict_clip(x2d, weights, config), x3d.values) for x2d, x3d in pairs]
    frames = [x3d.frames for _, x3d in pairs]
    return float(np.average(errors, weights=frames))


def save_trainer_checkpoint(path, model_config: ModelConfig, train_config: TrainConfig, state: TrainerState) -> None:
    extra_tensors = {}
    for name in state.optimizer.m:
        extra_tensors[f"optim.m.{name}"] = state.optimizer.m[name]
        extra_tensors[f"optim.v.{name}"] = state.optimizer.v[name]
    opt = state.optimizer
    header = {
        "trainer": {
            "epoch": state.epoch,
            "step": opt.step,
            "betas": [opt.beta1, opt.beta2],
            "eps": opt.eps,
            "rng_state": state.rng_state,
            "train_config": dataclasses.asdict(train_config),
        }
    }
    save_model(path, model_config, state.weights, header, extra_tensors)


def load_trainer_checkpoint(path) -> tuple[ModelConfig, TrainConfig, TrainerState]:
    config, weights, header, extra = load_model(path)
    meta = header.get("trainer", {})
    opt = AdamWState(step=meta.get("step", 0), beta1=meta.get("betas", [0.9, 0.999])[0],
                     beta2=meta.get("betas", [0.9, 0.999])[1], eps=meta.get("eps", 1e-8))
    for key, arr in extra.items():
        kind, _, name = key.partition(".")[2].partition(".")
        if key.startswith("optim.") and kind in ("m", "v"):
            getattr(opt, kind)[name] = np.ascontiguousarray(arr)
    train_config = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else TrainConfig()
    state = TrainerState(weights, opt, meta.get("epoch", 0), meta.get("rng_state"))
    return config, train_config, state


def initial_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainerState:
    rng = np.random.default_rng(train_config.seed)
    opt = AdamWState(beta1=train_config.beta1, beta2=train_config.beta2, eps=train_config.eps)
    weights = init_weights(model_config, seed=train_config.seed)
    return TrainerState(weights, opt, 0, rng.bit_generator.state)


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    data: DatasetManifest | list[tuple[PoseClip, PoseClip]],
    out_dir=None,
    state: TrainerState | None = None,
    eval_pairs: list[tuple[PoseClip, PoseClip]] | None = None,
) -> TrainResult:
    """Run epochs ``state.epoch .. train_config.epochs - 1``.

    ``data`` is a manifest (its ``train`` split is used) or a list of clip
    pairs.  With ``out_dir`` a JSON-lines log and ``last.ssrw`` are written
    after every epoch; on a non-finite loss training stops and the last good
    checkpoint stays on disk.
    """
    problems = model_config.validate() + train_config.validate()
    if problems:
        raise ValueError("invalid configuration: " + "; ".join(problems))
    if isinstance(data, DatasetManifest):
        pairs = data.pairs("train")
        if eval_pairs is None:
            split = train_config.eval_split or ("test" if "test" in data.splits() else "train")
            eval_pairs = data.pairs(split)
    else:
        pairs = data
    if eval_pairs is None:
        eval_pairs = pairs
    if state is None:
        state = initial_state(model_config, train_config)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if state.epoch == 0:
            save_trainer_checkpoint(out_dir / "last.ssrw", model_config, train_config, state)

    rng = np.random.default_rng()
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    params = state.weights.named()
    history = []
    while state.epoch < train_config.epochs:
        epoch = state.epoch
        lr = lr_at(epoch, train_config.lr, train_config.lr_decay)
        shuffle_seed = int(rng.integers(2**63 - 1))
        sums = np.zeros(3)
        batches = 0
        for batch in batch_iterator(pairs, train_config.batch_size, model_config.frames, shuffle_seed):
            with GradTape() as tape:
                _, pred = forward(Tensor(batch.x2d), state.weights, model_config, check=False)
                losses = loss_total(pred, batch.gt3d, model_config.lambda_delta, model_config.reduction)
            values = losses.as_floats()
            if not all(math.isfinite(x) for x in values.values()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {values}")
            grads = backward(tape, losses.total, params)
            if train_config.clip_norm is not None:
                clip_global_norm(grads, train_config.clip_norm)
            adamw_step(params, grads, state.optimizer, lr, train_config.weight_decay)
            sums += [values["l_p"], values["l_delta"], values["total"]]
            batches += 1
        state.epoch += 1
        state.rng_state = rng.bit_generator.state
        mean = sums / max(batches, 1)
        record = {
            "epoch": epoch,
            "lr": lr,
            "l_p": mean[0],
            "l_delta": mean[1],
            "total": mean[2],
            "eval_mpjpe_mm": evaluate_pairs(eval_pairs, state.weights, model_config),
        }
        history.append(record)
        log.info("epoch %d lr %.3g loss %.3f eval %.2f mm", epoch, lr, record["total"], record["eval_mpjpe_mm"])
        if out_dir is not None:
            with open(out_dir / "log.jsonl", "a") as f:
                f.write(json.dumps(record) + "\n")
            save_trainer_checkpoint(out_dir / "last.ssrw", model_config, train_config, state)
    return TrainResult(state, history)
