import numpy as np
import pytest

from ssrstf.conv import SSRAKernelSpec, compose_dense_oracle, dw_size, dwd_size
from ssrstf.gradcheck import check_gradients
from ssrstf.layers import MLPWeights, NormWeights, named_parameters
from ssrstf.ssrformer import (
    SSRAWeights,
    SSRBlockWeights,
    long_short_axes,
    ssr_module,
    ssra,
    ssra_aggregate,
    ssrformer_block,
)
from ssrstf.tensor import ShapeError, Tensor, gelu, layer_norm, precision, sum_all
from ssrstf.verify import dense_reference


def delta(c, k):
    w = np.zeros((c, k))
    w[:, k // 2] = 1.0
    return Tensor(w)


def test_orientation_axes():
    assert long_short_axes("spatial") == ("joint", "temporal")
    assert long_short_axes("temporal") == ("temporal", "joint")
    with pytest.raises(ValueError):
        long_short_axes("diagonal")


class TestSSRA:
    def test_delta_kernels_give_square(self, rng):
        spec = SSRAKernelSpec(11, 2, 7, 2)
        c = 3
        w = SSRAWeights(delta(c, 3), delta(c, 5), Tensor(np.eye(c)), Tensor(np.zeros(c)), delta(c, 3), delta(c, 3))
        x = rng.normal(size=(2, 4, 5, c)).astype(np.float32)
        for o in ("spatial", "temporal"):
            np.testing.assert_array_equal(ssra(Tensor(x), w, spec, o).data, x * x)

    def test_long_axis_matches_dense_oracle(self, rng):
        spec = SSRAKernelSpec(11, 2)
        c = 4
        w = SSRAWeights.init(rng, c, spec)
        x = rng.normal(size=(2, 6, 13, c))
        dense = compose_dense_oracle(w.w_dw1.data, 1, w.w_dwd1.data, 2)
        for o, axis in (("spatial", 2), ("temporal", 1)):
            agg = dense_reference(x, dense, axis)
            ref = (agg @ w.w_a.data.astype(np.float64) + w.b_a.data) * x
            np.testing.assert_allclose(ssra(Tensor(x), w, spec, o).data, ref, atol=1e-5)

    def test_zero_projection_gives_zero(self, rng):
        spec = SSRAKernelSpec(11, 2)
        w = SSRAWeights.init(rng, 3, spec)
        w.w_a.data[...] = 0
        assert not ssra(Tensor(rng.normal(size=(1, 4, 5, 3))), w, spec, "spatial").data.any()

    def test_short_axis_absent_spec_mismatch(self, rng):
        w = SSRAWeights.init(rng, 3, SSRAKernelSpec(11, 2))
        with pytest.raises(ShapeError):
            ssra(Tensor(np.zeros((1, 4, 5, 3))), w, SSRAKernelSpec(11, 2, 3, 1), "spatial")

    def test_short_axis_of_extent_one(self, rng):
        spec = SSRAKernelSpec(11, 2, 7, 2)
        w = SSRAWeights.init(rng, 2, spec)
        assert ssra(Tensor(rng.normal(size=(1, 1, 5, 2))), w, spec, "spatial").shape == (1, 1, 5, 2)

    def test_receptive_field_bound(self, rng):
        # spatial {35,3,11,2}: reach 17 along J, 5 along T
        spec = SSRAKernelSpec(35, 3, 11, 2)
        w = SSRAWeights.init(rng, 2, spec)
        x = rng.normal(size=(1, 30, 50, 2))
        base = ssra_aggregate(Tensor(x), w, spec, "spatial").data
        x2 = x.copy()
        x2[0, :, 15 + 18:] += 1.0
        x2[0, 21:, :] += 1.0
        out = ssra_aggregate(Tensor(x2), w, spec, "spatial").data
        assert np.array_equal(out[0, 15, 15], base[0, 15, 15])
        x3 = x.copy()
        x3[0, 15, 15 + 17] += 1.0
        assert not np.array_equal(ssra_aggregate(Tensor(x3), w, spec, "spatial").data[0, 15, 15], base[0, 15, 15])

    def test_row_independence_without_short_axis(self, rng):
        spec = SSRAKernelSpec(11, 2)
        w = SSRAWeights.init(rng, 2, spec)
        x = rng.normal(size=(1, 6, 7, 2))
        for o, axis in (("spatial", 1), ("temporal", 2)):
            base = ssra(Tensor(x), w, spec, o).data
            x2 = x.copy()
            np.moveaxis(x2, axis, 0)[3] += 5.0
            out = ssra(Tensor(x2), w, spec, o).data
            keep = [i for i in range(x.shape[axis]) if i != 3]
            assert np.array_equal(np.take(out, keep, axis), np.take(base, keep, axis))


def zero_block(w: SSRBlockWeights, keep_norm=True):
    for name, p in named_parameters(w):
        if not (keep_norm and name.startswith(("norm1", "norm2"))):
            p.data[...] = 0.0


class TestSSRModule:
    def test_zero_exit_projection_is_residual(self, rng):
        spec = SSRAKernelSpec(11, 2)
        w = SSRBlockWeights.init(rng, 4, spec)
        w.pw_out_w.data[...] = 0
        x = rng.normal(size=(1, 3, 5, 4)).astype(np.float32)
        assert np.array_equal(ssr_module(Tensor(x), w, spec, "spatial").data, x)

    def test_sequential_reference(self, rng):
        spec = SSRAKernelSpec(11, 2, 3, 1)
        w = SSRBlockWeights.init(rng, 4, spec)
        x = rng.normal(size=(2, 3, 5, 4))
        with precision("float64"):
            f = lambda a: a.astype(np.float64)  # noqa: E731
            h = gelu(Tensor(x @ f(w.pw_in_w.data) + f(w.pw_in_b.data))).data
            a = ssra_aggregate(Tensor(h), w.ssra, spec, "temporal").data @ f(w.ssra.w_a.data) + f(w.ssra.b_a.data)
            ref = x + (a * h) @ f(w.pw_out_w.data) + f(w.pw_out_b.data)
        np.testing.assert_allclose(ssr_module(Tensor(x), w, spec, "temporal").data, ref, atol=1e-6, rtol=1e-5)

    def test_gradients(self, rng):
        spec = SSRAKernelSpec(7, 2, 3, 1)
        with precision("float64"):
            w = SSRBlockWeights.init(rng, 4, spec)
            x = Tensor(rng.normal(size=(1, 4, 5, 4)))
            r = rng.normal(size=(1, 4, 5, 4))
            params = dict(named_parameters(w.ssra, "ssra"))
            params.update({"pw_in_w": w.pw_in_w, "pw_in_b": w.pw_in_b, "pw_out_w": w.pw_out_w, "pw_out_b": w.pw_out_b})
            samples = check_gradients(lambda: sum_all(ssr_module(x, w, spec, "spatial") * Tensor(r)), params)
        assert max(s.rel_error for s in samples if abs(s.numeric) > 1e-8) <= 1e-4


class TestSSRFormerBlock:
    def test_zero_branches_identity(self, rng):
        spec = SSRAKernelSpec(11, 2)
        w = SSRBlockWeights.init(rng, 4, spec)
        zero_block(w, keep_norm=False)
        x = rng.normal(size=(1, 3, 5, 4)).astype(np.float32)
        for literal in (True, False):
            assert np.array_equal(ssrformer_block(Tensor(x), w, spec, "spatial", literal).data, x)

    def test_zero_branches_keep_inner_residual(self, rng):
        # the SSR module adds its own input, here Norm(x), on top of the outer residual
        spec = SSRAKernelSpec(11, 2)
        w = SSRBlockWeights.init(rng, 4, spec)
        zero_block(w, keep_norm=True)
        x = rng.normal(size=(1, 3, 5, 4)).astype(np.float32)
        expected = x + layer_norm(Tensor(x), w.norm1.gamma, w.norm1.beta).data
        np.testing.assert_array_equal(ssrformer_block(Tensor(x), w, spec, "temporal").data, expected)

    def test_compositional_oracle(self, rng):
        spec = SSRAKernelSpec(11, 2, 3, 1)
        w = SSRBlockWeights.init(rng, 8, spec)
        x = Tensor(rng.normal(size=(2, 4, 5, 8)))
        for literal in (True, False):
            y = ssr_module(w.norm1(x), w, spec, "spatial") + x
            h = w.norm2(y)
            mlp_out = (gelu(h @ w.mlp.w1 + w.mlp.b1)) @ w.mlp.w2 + w.mlp.b2
            z = (gelu(mlp_out) if literal else mlp_out) + y
            assert np.array_equal(ssrformer_block(x, w, spec, "spatial", literal).data, z.data)

    def test_batch_permutation(self, rng):
        spec = SSRAKernelSpec(11, 2)
        w = SSRBlockWeights.init(rng, 4, spec)
        x = rng.normal(size=(3, 4, 5, 4))
        perm = [2, 0, 1]
        a = ssrformer_block(Tensor(x), w, spec, "temporal").data[perm]
        b = ssrformer_block(Tensor(x[perm]), w, spec, "temporal").data
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)

    def test_mlp_hidden_width(self, rng):
        w = SSRBlockWeights.init(rng, 8, SSRAKernelSpec(11, 2), mlp_ratio=3)
        assert w.mlp.w1.shape == (8, 24)

    def test_weight_shapes(self, rng):
        spec = SSRAKernelSpec(35, 3, 11, 2)
        w = SSRAWeights.init(rng, 6, spec)
        assert w.w_dw1.shape == (6, dw_size(3)) and w.w_dwd1.shape == (6, dwd_size(35, 3))
        assert w.w_dw2.shape == (6, 3) and w.w_dwd2.shape == (6, 5)
        assert isinstance(NormWeights.init(3), NormWeights) and isinstance(MLPWeights.init(rng, 2, 4), MLPWeights)
