"""SSR-STF: 2D-to-3D human pose lifting on a small numpy autodiff engine.

Submodules: ``tensor`` (tape autodiff), ``conv`` (depth-wise and dilated
kernels), ``ssrformer`` / ``stformer`` (local and global blocks), ``model``,
``metrics``, ``data``, ``trainer``, ``checkpoint``, ``verify`` and ``cli``.
"""

from .model import ModelConfig, forward, init_weights, param_count, preset
from .tensor import GradTape, Tensor, backward, precision

__version__ = "0.1.0"

__all__ = [
    "GradTape",
    "ModelConfig",
    "Tensor",
    "backward",
    "forward",
    "init_weights",
    "param_count",
    "precision",
    "preset",
]
