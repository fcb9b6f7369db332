"""Decompose an irregular large kernel into DW -> DWD stages and check it
against the one dense kernel it stands for.

    python demos/kernel_decomposition.py
"""

import numpy as np

from ssrstf.conv import ABLATION_SPECS, Conv1DSpec, cascade_conv1d, compose_dense_oracle, dw_size, dwd_size
from ssrstf.tensor import Tensor, precision
from ssrstf.verify import dense_reference

rng = np.random.default_rng(0)
x = rng.normal(size=(1, 40, 17, 4))

print(f"{'spec':<14}{'extents':<10}{'DW':>4}{'DWD':>5}  max |cascade - dense|")
for label, spec in ABLATION_SPECS.items():
    k, d = spec.k1, spec.d1
    dw, dwd = rng.normal(size=(4, dw_size(d))), rng.normal(size=(4, dwd_size(k, d)))
    with precision("float64"):
        stages = [(Tensor(dw), Conv1DSpec(dw_size(d), 1, "temporal")),
                  (Tensor(dwd), Conv1DSpec(dwd_size(k, d), d, "temporal"))]
        got = cascade_conv1d(Tensor(x), stages).data
    dense = compose_dense_oracle(dw, 1, dwd, d)
    dev = np.abs(got - dense_reference(x, dense, axis=1)).max()
    extents = "x".join(map(str, spec.extents()))
    print(f"{str(spec):<14}{extents:<10}{dw.shape[1]:>4}{dwd.shape[1]:>5}  {dev:.2e}")

# the weight count is what the decomposition buys
k, d = 35, 3
print(f"\n35-tap dense kernel: 35 weights per channel; DW+DWD: {dw_size(d) + dwd_size(k, d)}")
