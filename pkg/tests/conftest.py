import numpy as np
import pytest

from ssrstf.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(depth=1, channels=8, motion_channels=8, frames=4, joints=5, heads=2, kernel=[11, 2, 3, 1])
