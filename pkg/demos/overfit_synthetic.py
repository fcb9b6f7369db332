"""Train a small lifter on synthetic clips and watch the error fall.

    python demos/overfit_synthetic.py [epochs]

With the default 40 epochs this takes a few minutes on one core.
"""

import logging
import sys

from ssrstf.data import SyntheticRigConfig, generate_synthetic
from ssrstf.metrics import evaluate
from ssrstf.model import ModelConfig, param_count
from ssrstf.trainer import TrainConfig, initial_state, predict_clip, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 40

samples = generate_synthetic(SyntheticRigConfig(seed=0), clips=8, frames=27)
pairs = [(s.pose2d, s.pose3d) for s in samples]
config = ModelConfig(depth=4, channels=64, motion_channels=128, frames=27, joints=17, heads=4, kernel=[35, 3, 11, 2])
print(f"model: {param_count(config):,} parameters, kernel {config.kernel}")


def report(weights, tag):
    clips = [(x3d.clip_id, predict_clip(x2d, weights, config), x3d.values) for x2d, x3d in pairs]
    r = evaluate(clips)
    print(f"{tag:>8}: MPJPE {r.mpjpe_mm:7.1f} mm  P-MPJPE {r.p_mpjpe_mm:6.1f} mm  PCK {r.pck_percent:5.1f}  AUC {r.auc_percent:5.1f}")


tc = TrainConfig(epochs=epochs, batch_size=2)
state = initial_state(config, tc)
report(state.weights, "init")
result = train(config, tc, pairs, state=state)
report(result.state.weights, "trained")
