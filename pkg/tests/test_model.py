import numpy as np
import pytest

from ssrstf.gradcheck import check_gradients, relative_error, sample_indices
from ssrstf.model import (
    ModelConfig,
    dual_stream_block,
    embed,
    forward,
    fusion_weights,
    global_stream,
    init_weights,
    local_stream,
    loss_position,
    loss_total,
    loss_velocity,
    param_breakdown,
    param_count,
    parameter_shapes,
    preset,
)
from ssrstf.tensor import ShapeError, Tensor, precision


@pytest.fixture
def small_model(rng):
    config = ModelConfig(depth=2, channels=8, motion_channels=6, frames=5, joints=4, heads=2, kernel=[11, 2, None, None])
    return config, init_weights(config, seed=3)


class TestConfig:
    def test_presets(self):
        base, small = preset("base"), preset("small")
        assert (base.depth, base.channels, base.motion_channels) == (12, 256, 512)
        assert (small.depth, small.channels, small.motion_channels) == (16, 128, 512)
        with pytest.raises(ValueError):
            preset("huge")

    def test_validation_lists_everything(self):
        problems = ModelConfig(depth=0, channels=7, frames=0, joints=1, lambda_delta=-1).validate()
        assert len(problems) >= 5

    def test_dict_round_trip_rejects_unknown(self):
        c = ModelConfig(kernel=[23, 3, 7, 2])
        assert ModelConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({"depht": 3})


class TestCensus:
    def test_base_and_small_within_tolerance(self):
        assert abs(param_count(preset("base")) / 36.7e6 - 1) <= 0.15
        assert abs(param_count(preset("small")) / 12.4e6 - 1) <= 0.15

    def test_depth_linearity(self):
        counts = {n: param_count(ModelConfig(depth=n, channels=256, motion_channels=512)) for n in (1, 6, 12)}
        per_block = counts[6] - counts[1]
        assert (counts[12] - counts[6]) * 5 == per_block * 6
        fixed = counts[1] - per_block // 5
        assert counts[12] - fixed == 2 * (counts[6] - fixed)

    def test_shapes_match_weights(self, small_model):
        config, weights = small_model
        named = weights.named()
        assert {k: v.shape for k, v in named.items()} == parameter_shapes(config)
        assert sum(param_breakdown(config).values()) == param_count(config) == sum(p.data.size for p in named.values())


class TestEmbed:
    def test_zero_weights(self, small_model):
        _, w = small_model
        w.embed_w.data[...] = 0
        w.pos.data[...] = 0
        assert not embed(Tensor(np.ones((1, 2, 4, 3))), w).data.any()

    def test_positional_encoding_is_time_independent(self, small_model, rng):
        _, w = small_model
        x = np.repeat(rng.normal(size=(1, 1, 4, 3)), 3, axis=1)
        out = embed(Tensor(x), w).data
        assert np.array_equal(out[:, 0], out[:, 2])

    def test_per_position_oracle(self, small_model, rng):
        _, w = small_model
        x = rng.normal(size=(2, 3, 4, 3))
        ref = np.einsum("btji,ic->btjc", x, w.embed_w.data) + w.embed_b.data + w.pos.data
        np.testing.assert_allclose(embed(Tensor(x), w).data, ref, atol=1e-6)

    def test_channel_count_checked(self, small_model):
        _, w = small_model
        with pytest.raises(ShapeError):
            embed(Tensor(np.zeros((1, 2, 4, 2))), w)


class TestFusion:
    def test_zero_map_averages(self, small_model, rng):
        config, w = small_model
        block = w.blocks[0]
        block.fusion_w.data[...] = 0
        block.fusion_b.data[...] = 0
        f = Tensor(rng.normal(size=(1, 5, 4, 8)))
        fl, fg = local_stream(f, block, config).data, global_stream(f, block, config).data
        np.testing.assert_allclose(dual_stream_block(f, block, config).data, (fl + fg) / 2, atol=1e-6)

    def test_saturated_bias_selects_local(self, small_model, rng):
        config, w = small_model
        block = w.blocks[0]
        block.fusion_w.data[...] = 0
        block.fusion_b.data[...] = [20.0, -20.0]
        f = Tensor(rng.normal(size=(1, 5, 4, 8)))
        np.testing.assert_allclose(dual_stream_block(f, block, config).data, local_stream(f, block, config).data,
                                   atol=1e-5)

    def test_weights_sum_to_one(self, rng):
        for _ in range(20):
            fl, fg = Tensor(rng.normal(size=(2, 3, 4, 6)) * 5), Tensor(rng.normal(size=(2, 3, 4, 6)) * 5)
            al, ag = fusion_weights(fl, fg, Tensor(rng.normal(size=(12, 2)) * 3), Tensor(rng.normal(size=2)))
            assert al.shape == (2, 3, 4, 1)
            assert np.abs(al.data.astype(np.float64) + ag.data - 1).max() <= 1e-6


class TestForward:
    def test_shapes_and_range(self):
        config = ModelConfig(depth=1, channels=16, motion_channels=12, frames=27, joints=17, heads=2,
                             kernel=[11, 2, None, None])
        w = init_weights(config, seed=0)
        motion, pose = forward(Tensor(np.random.default_rng(0).uniform(-1, 1, size=(2, 27, 17, 3))), w, config)
        assert motion.shape == (2, 27, 17, 12) and pose.shape == (2, 27, 17, 3)
        assert np.all(np.abs(motion.data) < 1)

    def test_deterministic(self, small_model, rng):
        config, w = small_model
        x = Tensor(rng.normal(size=(2, 5, 4, 3)))
        assert np.array_equal(forward(x, w, config)[1].data, forward(x, w, config)[1].data)
        w2 = init_weights(config, seed=3)
        assert np.array_equal(forward(x, w2, config)[1].data, forward(x, w, config)[1].data)

    def test_head_reads_motion_representation(self, small_model, rng):
        config, w = small_model
        motion, pose = forward(Tensor(rng.normal(size=(1, 5, 4, 3))), w, config)
        ref = (motion.data @ w.head_w.data + w.head_b.data) * config.output_scale_mm
        np.testing.assert_allclose(pose.data, ref, rtol=1e-5, atol=1e-3)

    def test_mismatch_names_first_parameter(self, small_model):
        config, w = small_model
        other = ModelConfig(**{**config.to_dict(), "channels": 16})
        with pytest.raises(ShapeError, match="embed_w"):
            forward(Tensor(np.zeros((1, 5, 4, 3))), w, other)

    def test_temporal_first_order(self, small_model, rng):
        config, w = small_model
        swapped = ModelConfig(**{**config.to_dict(), "local_order": "temporal_first"})
        x = Tensor(rng.normal(size=(1, 5, 4, 3)))
        assert not np.allclose(forward(x, w, config)[1].data, forward(x, w, swapped)[1].data)


class TestLosses:
    def test_position(self, rng):
        x = rng.normal(size=(2, 3, 4, 3))
        assert loss_position(x, x).item() == 0
        pred = np.zeros((1, 1, 1, 3))
        gt = np.array([3.0, 4.0, 0.0]).reshape(1, 1, 1, 3)
        assert loss_position(pred, gt, "sum").item() == 5.0
        pred, gt = rng.normal(size=(2, 3, 4, 3)), rng.normal(size=(2, 3, 4, 3))
        ref = np.linalg.norm(pred - gt, axis=-1).mean()
        assert relative_error(loss_position(pred, gt).item(), ref) <= 1e-6

    def test_velocity(self, rng):
        static = np.repeat(rng.normal(size=(1, 1, 4, 3)), 5, axis=1)
        assert loss_velocity(static, static + 7.0).item() == 0
        pred = np.zeros((1, 2, 1, 3))
        pred[0, 1, 0] = [3.0, 4.0, 0.0]
        assert loss_velocity(pred, np.zeros((1, 2, 1, 3)), "sum").item() == 5.0
        assert loss_velocity(np.zeros((1, 1, 2, 3)), np.ones((1, 1, 2, 3))).item() == 0.0

    def test_total(self, rng):
        pred, gt = rng.normal(size=(1, 4, 2, 3)), rng.normal(size=(1, 4, 2, 3))
        lv = loss_total(pred, gt, 0.0)
        assert lv.total.item() == lv.position.item()
        assert loss_total(gt, gt, 0.7).total.item() == 0
        with pytest.raises(ValueError):
            loss_total(pred, gt, -1.0)
        with pytest.raises(ShapeError):
            loss_position(pred, gt[:, :3])

    def test_combination_arithmetic(self):
        # per-frame errors 0.5, -1, 0.5 along x: L_P = 2, L_delta = 3, total 3.5 at lambda 0.5
        pred = np.zeros((1, 3, 1, 3))
        pred[0, :, 0, 0] = [0.5, -1.0, 0.5]
        lv = loss_total(pred, np.zeros_like(pred), 0.5, "sum")
        assert (lv.position.item(), lv.velocity.item(), lv.total.item()) == (2.0, 3.0, 3.5)


def test_end_to_end_gradients(tiny_config, rng):
    with precision("float64"):
        w = init_weights(tiny_config, seed=1)
        params = w.named()
        x = Tensor(rng.uniform(-1, 1, size=(1, 4, 5, 3)))
        gt = Tensor(rng.normal(0, 300, size=(1, 4, 5, 3)))

        def loss_fn():
            return loss_total(forward(x, w, tiny_config, check=False)[1], gt, 1.0).total

        samples = check_gradients(loss_fn, params, sample_indices(params, 1, rng))
        noise = 16 * np.spacing(loss_fn().item()) / 2e-5
    assert len({s.name for s in samples}) == len(params)
    assert max(relative_error(s.analytic, s.numeric, noise / 1e-4) for s in samples) <= 1e-4
