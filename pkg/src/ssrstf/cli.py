"""``ssrstf`` command line: gen-data, train, eval, infer, verify, info.

Results go to stdout as JSON; progress and errors go to stderr.  Exit code
0 means the command fully succeeded, 1 a failed verification, 2 bad input.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics, verify
from .checkpoint import CheckpointError, load_model
from .data import (
    KIND_2D,
    ClipFormatError,
    DatasetManifest,
    PoseClip,
    SyntheticRigConfig,
    generate_synthetic,
    load_clip,
    save_clip,
    write_dataset,
)
from .model import PRESETS, ModelConfig, param_breakdown, param_count
from .trainer import TrainConfig, TrainingDiverged, load_trainer_checkpoint, predict_clip, train

log = logging.getLogger("ssrstf")

RUN_CONFIG_KEYS = {"preset", "model", "train", "data"}
PROTOCOLS = ("p1", "p2", "pck", "auc", "all")


class UsageError(Exception):
    """Bad flags, paths or configuration: exit code 2."""


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: str | None = None

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": dataclasses.asdict(self.train), "data": self.data}


def load_run_config(source: dict | str | Path) -> RunConfig:
    """Parse a run config, listing every problem at once.

    Layout: ``{"preset": "base"|"small", "model": {...}, "train": {...},
    "data": "dir"}``; all keys optional.  Model keys override the preset.
    """
    if not isinstance(source, dict):
        try:
            source = json.loads(Path(source).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {source}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {source} is not valid JSON: {exc}") from None
    problems = []
    unknown = sorted(set(source) - RUN_CONFIG_KEYS)
    if unknown:
        problems.append(f"unknown top-level keys: {unknown}")
    name = source.get("preset")
    base = {}
    if name is not None:
        if name not in PRESETS:
            problems.append(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        else:
            base = dict(PRESETS[name])
    model_cfg = train_cfg = None
    try:
        model_cfg = ModelConfig.from_dict({**base, **source.get("model", {})})
        problems += model_cfg.validate()
    except (TypeError, ValueError) as exc:
        problems.append(str(exc))
    try:
        train_cfg = TrainConfig.from_dict(source.get("train", {}))
        problems += train_cfg.validate()
    except (TypeError, ValueError) as exc:
        problems.append(str(exc))
    if problems:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(problems))
    return RunConfig(model_cfg, train_cfg, source.get("data"))


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"data directory not found: {path}")
    return DatasetManifest.load(path)


# commands -----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.joints < 2:
        raise UsageError(f"--joints must be >= 2, got {args.joints}")
    if args.clips < 1 or args.frames < 1:
        raise UsageError("--clips and --frames must be >= 1")
    if not 0 <= args.test_clips < args.clips:
        raise UsageError("--test-clips must be in [0, clips)")
    rig = SyntheticRigConfig.chain(args.joints, seed=args.seed, keypoint_noise=args.noise)
    samples = generate_synthetic(rig, args.clips, args.frames)
    manifest = write_dataset(samples, args.out, test_clips=args.test_clips)
    _emit({
        "out": str(Path(args.out)),
        "clips": args.clips,
        "frames": args.frames,
        "joints": args.joints,
        "seed": args.seed,
        "noise": args.noise,
        "splits": {s: sum(e.split == s for e in manifest.entries) // 2 for s in sorted(manifest.splits())},
        "checksums": {e.path: e.checksum for e in manifest.entries},
    })
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    data_dir = args.data or run.data
    if data_dir is None:
        raise UsageError("no data directory: pass --data or set \"data\" in the config")
    manifest = _manifest(data_dir)
    state = None
    if args.resume:
        try:
            ck_model, ck_train, state = load_trainer_checkpoint(args.resume)
        except FileNotFoundError:
            raise UsageError(f"checkpoint not found: {args.resume}") from None
        if ck_model.to_dict() != run.model.to_dict():
            raise UsageError("checkpoint model config differs from --config")
        ck_train.epochs = run.train.epochs
        if dataclasses.asdict(ck_train) != dataclasses.asdict(run.train):
            raise UsageError("checkpoint trainer settings differ from --config (only epochs may change)")
    try:
        result = train(run.model, run.train, manifest, out_dir=args.out, state=state)
    except TrainingDiverged as exc:
        log.error("%s; last good checkpoint kept in %s", exc, args.out)
        return 1
    last = result.history[-1] if result.history else None
    _emit({
        "out": str(Path(args.out)),
        "epochs_completed": result.state.epoch,
        "optimizer_steps": result.state.optimizer.step,
        "checkpoint": str(Path(args.out) / "last.ssrw"),
        "last_epoch": last,
    })
    return 0


def cmd_eval(args) -> int:
    config, weights = _load_weights(args.ckpt)
    manifest = _manifest(args.data)
    split = args.split or ("test" if "test" in manifest.splits() else "train")
    if split not in manifest.splits():
        raise UsageError(f"split {split!r} not in manifest (have {sorted(manifest.splits())})")
    clips = []
    for x2d, x3d in manifest.pairs(split):
        _check_joints(x2d, config)
        clips.append((x3d.clip_id, predict_clip(x2d, weights, config), x3d.values))
    report = metrics.evaluate(clips, strict_rigid=args.strict_rigid, bin_width_mm=args.bin_width)
    if args.hist:
        report.histogram.to_csv(args.hist)
    out = report.to_dict()
    out.pop("histogram")
    keep = {"p1": "mpjpe_mm", "p2": "p_mpjpe_mm", "pck": "pck_percent", "auc": "auc_percent"}
    if args.protocol != "all":
        drop = set(keep.values()) - {keep[args.protocol]}
        out = {k: v for k, v in out.items() if k not in drop}
        out["per_action"] = {a: {keep[args.protocol]: v[keep[args.protocol]]} for a, v in out["per_action"].items()}
    out.update(split=split, clips=len(clips), frames=int(sum(len(c[2]) for c in clips)))
    _emit(out)
    return 0


def cmd_infer(args) -> int:
    config, weights = _load_weights(args.ckpt)
    try:
        clip = load_clip(args.input)
    except FileNotFoundError:
        raise UsageError(f"input clip not found: {args.input}") from None
    if clip.kind != KIND_2D:
        raise UsageError(f"input must be a pose2d clip, got {clip.kind}")
    _check_joints(clip, config)
    pose = predict_clip(clip, weights, config)
    save_clip(PoseClip(pose.astype(np.float32), "pose3d", clip.clip_id, clip.fps), args.out)
    _emit({"out": str(args.out), "frames": clip.frames, "joints": clip.joints})
    return 0


def cmd_verify(args) -> int:
    report = verify.run(args.suite, f64=args.f64, tamper=args.tamper)
    _emit(report)
    for c in report["checks"]:
        if not c["passed"]:
            log.error("FAILED %s/%s: %s", c["suite"], c["check"], json.dumps(c["detail"]))
    return 0 if report["passed"] else 1


def cmd_info(args) -> int:
    if args.config:
        config = load_run_config(args.config).model
    else:
        config = ModelConfig(**PRESETS[args.preset])
    _emit({
        "config": config.to_dict(),
        "parameters": param_count(config),
        "parameters_millions": round(param_count(config) / 1e6, 3),
        "breakdown": param_breakdown(config),
        "kernel": str(config.kernel),
        "effective_extents": list(config.kernel.extents()),
    })
    return 0


def _load_weights(path):
    try:
        config, weights, _, _ = load_model(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    return config, weights


def _check_joints(clip: PoseClip, config: ModelConfig) -> None:
    if clip.joints != config.joints:
        raise UsageError(f"clip {clip.clip_id!r} has {clip.joints} joints, model expects {config.joints}")


# parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssrstf", description="2D-to-3D pose lifting with SSR-STF.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic paired clips and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, default=8)
    g.add_argument("--frames", type=int, default=243)
    g.add_argument("--joints", type=int, default=17)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.0, help="2D keypoint noise std, normalized units")
    g.add_argument("--test-clips", type=int, default=0, help="last N clips form the test split")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", choices=PROTOCOLS, default="all")
    e.add_argument("--strict-rigid", action="store_true", help="Procrustes without scale")
    e.add_argument("--split")
    e.add_argument("--hist", help="write the per-pose error histogram CSV here")
    e.add_argument("--bin-width", type=float, default=10.0)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="lift one 2D clip to 3D")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("verify", help="run the oracle suites")
    v.add_argument("--suite", choices=[*verify.SUITES, "all"], default="all")
    v.add_argument("--f64", action="store_true", help="64-bit equivalence and metric suites")
    v.add_argument("--tamper", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    n = sub.add_parser("info", help="parameter census and kernel extents")
    src = n.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--preset", choices=sorted(PRESETS))
    n.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("SSRSTF_THREADS")
    try:
        if threads:
            if not threads.isdigit() or int(threads) < 1:
                raise UsageError(f"SSRSTF_THREADS must be a positive integer, got {threads!r}")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except (UsageError, ClipFormatError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"ssrstf {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
