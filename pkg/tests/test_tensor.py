import math
import zlib

import mpmath
import numpy as np
import pytest

from ssrstf.gradcheck import check_gradients, check_op
from ssrstf.tensor import (
    GradTape,
    ShapeError,
    TapeError,
    Tensor,
    add,
    backward,
    concat_last_axis,
    gelu,
    get_default_dtype,
    hadamard,
    layer_norm,
    linear,
    matmul,
    mean_all,
    norm_last_axis,
    permute,
    precision,
    reshape,
    scale,
    slice_axis,
    softmax_last_axis,
    sub,
    sum_all,
)


def triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_default_dtype_is_float32_and_switchable():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with precision("float64"):
        assert get_default_dtype() == np.float64
        assert Tensor([1.0]).dtype == np.float64
    assert get_default_dtype() == np.float32
    with pytest.raises(ValueError):
        with precision("float16"):
            pass


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(3, 4))
        np.testing.assert_allclose(matmul(Tensor(np.eye(3)), Tensor(m)).data, m, rtol=1e-6)

    def test_hand_arithmetic(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        assert out.data.tolist() == [[3.0], [7.0]]

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 6))
        ref = triple_loop(a, b)
        got = matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - ref).max() <= 1e-6 * np.abs(ref).max()

    def test_batched_broadcast(self, rng):
        a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(5, 2))
        got = matmul(Tensor(a), Tensor(b)).data
        for i in range(2):
            for j in range(3):
                np.testing.assert_allclose(got[i, j], triple_loop(a[i, j], b), rtol=1e-5, atol=1e-6)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_last_axis(Tensor([7.0, 7.0, 7.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_exact_case(self):
        with precision("float64"):
            out = softmax_last_axis(Tensor([0.0, math.log(2), math.log(3)])).data
        np.testing.assert_allclose(out, [1 / 6, 1 / 3, 1 / 2], rtol=1e-12)

    def test_exp_normalize_oracle(self, rng):
        x = rng.normal(size=7) * 3
        ref = np.exp(x) / np.exp(x).sum()
        out = softmax_last_axis(Tensor(x)).data
        assert abs(out.astype(np.float64).sum() - 1) <= 1e-6
        np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-7)

    def test_stable_for_large_logits(self):
        out = softmax_last_axis(Tensor([1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_non_finite_reported(self):
        with pytest.raises(FloatingPointError):
            softmax_last_axis(Tensor([0.0, np.inf]))


class TestLayerNorm:
    def test_constant_slice_is_zero(self):
        out = layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
        assert np.all(out == 0)

    def test_two_values(self):
        with precision("float64"):
            out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-9)

    def test_moments(self, rng):
        x = rng.normal(5, 3, size=(6, 32))
        out = layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).data.astype(np.float64)
        assert np.abs(out.mean(-1)).max() <= 1e-6
        assert np.abs(out.var(-1) - 1).max() <= 1e-4

    def test_affine_shape_checked(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestGelu:
    def test_zero_and_saturation(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) <= 1e-4

    def test_high_precision_oracle(self):
        grid = np.linspace(-6, 6, 100)
        mpmath.mp.dps = 30
        ref = np.array([float(x * (1 + mpmath.erf(mpmath.mpf(x) / mpmath.sqrt(2))) / 2) for x in grid])
        with precision("float64"):
            got = gelu(Tensor(grid)).data
        assert np.abs(got - ref).max() <= 1e-6


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with GradTape() as tape:
            loss = sum_all(x)
        backward(tape, loss)
        assert np.all(x.grad == 1.0)

    def test_half_square_gives_x(self, rng):
        with precision("float64"):
            x = Tensor(rng.normal(size=(5,)), requires_grad=True)
            with GradTape() as tape:
                loss = scale(sum_all(hadamard(x, x)), 0.5)
            backward(tape, loss)
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-15)

    def test_unreachable_parameter_gets_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([[3.0]], requires_grad=True)
        with GradTape() as tape:
            loss = sum_all(x)
        grads = backward(tape, loss, {"x": x, "y": y})
        assert np.all(grads["y"] == 0) and grads["y"].shape == (1, 1)

    def test_reused_tape_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with GradTape() as tape:
            loss = sum_all(x)
        backward(tape, loss)
        with pytest.raises(TapeError):
            backward(tape, loss)
        with pytest.raises(TapeError):
            with tape:
                pass

    def test_backward_inside_recording_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with GradTape() as tape:
            loss = sum_all(x)
            with pytest.raises(TapeError):
                backward(tape, loss)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape() as tape:
            y = scale(x, 2.0)
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_no_tape_records_nothing(self):
        tape = GradTape()
        x = Tensor([1.0], requires_grad=True)
        sum_all(x)
        assert len(tape) == 0

    def test_fan_out_accumulates(self):
        with precision("float64"):
            x = Tensor([2.0, -1.0], requires_grad=True)
            with GradTape() as tape:
                loss = sum_all(add(hadamard(x, x), scale(x, 3.0)))
            backward(tape, loss)
        np.testing.assert_allclose(x.grad, 2 * x.data + 3)

    def test_composite_graph_matches_differences(self, rng):
        with precision("float64"):
            w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            b = Tensor(rng.normal(size=3), requires_grad=True)
            g = Tensor(rng.normal(size=3) + 1, requires_grad=True)
            x = Tensor(rng.normal(size=(2, 5, 4)))

            def loss_fn():
                h = layer_norm(gelu(linear(x, w, b)), g, b)
                return mean_all(norm_last_axis(softmax_last_axis(h) - h))

            samples = check_gradients(loss_fn, {"w": w, "b": b, "g": g})
        assert max(s.rel_error for s in samples) <= 1e-4


class TestElementwise:
    def test_hadamard_ones(self, rng):
        x = rng.normal(size=(3, 4)).astype(np.float32)
        assert np.array_equal(hadamard(Tensor(x), Tensor(np.ones((3, 4)))).data, x)

    def test_permute_round_trip_bit_identical(self, rng):
        x = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        y = permute(permute(Tensor(x), (0, 2, 1, 3)), (0, 2, 1, 3))
        assert np.array_equal(y.data, x)
        assert np.array_equal(reshape(reshape(Tensor(x), (6, 20)), x.shape).data, x)

    def test_concat_index_level(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 5))
        out = concat_last_axis([Tensor(a), Tensor(b)]).data
        assert out.shape == (2, 8)
        for i in range(2):
            for j in range(8):
                assert out[i, j] == np.float32(a[i, j] if j < 3 else b[i, j - 3])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
        with pytest.raises(ShapeError):
            sub(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
        with pytest.raises(ShapeError):
            permute(Tensor(np.zeros((2, 3))), (0, 0))
        with pytest.raises(ShapeError):
            reshape(Tensor(np.zeros((2, 3))), (4,))
        with pytest.raises(ShapeError):
            concat_last_axis([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])

    def test_norm_subgradient_at_zero(self):
        x = Tensor(np.zeros((1, 3)), requires_grad=True)
        with GradTape() as tape:
            loss = sum_all(norm_last_axis(x))
        backward(tape, loss)
        assert np.all(x.grad == 0)


PRIMITIVES = {
    "matmul": (matmul, [(2, 3, 4), (4, 5)]),
    "linear": (linear, [(3, 4), (4, 2), (2,)]),
    "add": (add, [(3, 4), (4,)]),
    "sub": (sub, [(3, 1), (3, 4)]),
    "hadamard": (hadamard, [(3, 4), (1, 4)]),
    "scale": (lambda a: scale(a, -1.7), [(3, 4)]),
    "softmax": (softmax_last_axis, [(3, 6)]),
    "gelu": (gelu, [(4, 5)]),
    "layer_norm": (layer_norm, [(3, 5), (5,), (5,)]),
    "norm": (norm_last_axis, [(4, 3)]),
    "concat": (lambda a, b: concat_last_axis([a, b]), [(2, 3), (2, 5)]),
    "permute": (lambda a: permute(a, (1, 2, 0)), [(2, 3, 4)]),
    "slice": (lambda a: slice_axis(a, 0, 1, 3), [(4, 3)]),
    "mean_all": (mean_all, [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_twenty_instances(name):
    op, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    with precision("float64"):
        worst = max(check_op(op, [rng.normal(size=s) * 1.5 for s in shapes], rng) for _ in range(20))
    assert worst <= 1e-4
