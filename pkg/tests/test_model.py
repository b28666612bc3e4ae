"""Network construction, forward semantics, and end-to-end gradients."""
import numpy as np
import pytest

from metaseg import losses, model, ops
from metaseg.model import ModelConfig, build_model, param_count
from metaseg.ops import ContractViolation

from fd import max_rel_error, numerical_grad, weighted_mean_loss

TINY = ModelConfig(input_hw=16, base_channels=2, encoder_stages=2,
                   rsd_skip_stage=1, rsd_out_channels=3)


@pytest.fixture
def tiny_theta():
    return build_model(TINY, np.random.default_rng(0))


class TestBuildModel:
    def test_param_count_matches_closed_form(self, tiny_theta):
        assert tiny_theta.num_params == param_count(TINY)

    def test_default_config_param_count(self):
        theta = build_model(ModelConfig(), np.random.default_rng(1))
        assert theta.num_params == param_count(ModelConfig())

    def test_same_seed_bitwise_identical(self):
        a = build_model(TINY, np.random.default_rng(7))
        b = build_model(TINY, np.random.default_rng(7))
        assert a.equals(b)

    def test_bn_init_values(self, tiny_theta):
        for name, value in tiny_theta.param_items():
            if name.endswith("gamma"):
                assert np.array_equal(value, np.ones_like(value))
            if name.endswith("beta"):
                assert np.array_equal(value, np.zeros_like(value))
        for key, value in tiny_theta.running_stats.items():
            expect = np.ones_like(value) if key.endswith("var") else np.zeros_like(value)
            assert np.array_equal(value, expect)

    def test_invalid_config_rejected(self):
        with pytest.raises(ContractViolation):
            ModelConfig(input_hw=30, encoder_stages=3)
        with pytest.raises(ContractViolation):
            ModelConfig(rsd_skip_stage=3, encoder_stages=3)
        with pytest.raises(ContractViolation):
            ModelConfig(num_output_channels=1)


class TestParameterSet:
    def test_flatten_unflatten_identity(self, tiny_theta):
        vec = tiny_theta.flatten()
        assert vec.size == tiny_theta.num_params
        rebuilt = tiny_theta.unflatten(vec)
        assert rebuilt.equals(tiny_theta)

    def test_snapshot_restore_roundtrip(self, tiny_theta):
        snap = tiny_theta.copy()
        tiny_theta.set("stem.kernel", tiny_theta.get("stem.kernel") + 1.0)
        tiny_theta.running_stats["stem.mean"] += 3.0
        assert not tiny_theta.equals(snap)
        tiny_theta.restore(snap)
        assert tiny_theta.equals(snap)

    def test_unflatten_wrong_length_rejected(self, tiny_theta):
        with pytest.raises(ContractViolation):
            tiny_theta.unflatten(np.zeros(tiny_theta.num_params + 1))


class TestForward:
    def test_probabilities_sum_to_one(self, tiny_theta):
        rng = np.random.default_rng(2)
        images = rng.random((3, 1, 16, 16))
        probs = model.forward(tiny_theta, images, mode="inference")
        assert probs.shape == (3, 2, 16, 16)
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-9

    def test_inference_deterministic_and_pure(self, tiny_theta):
        rng = np.random.default_rng(3)
        images = rng.random((2, 1, 16, 16))
        before = tiny_theta.copy()
        a = model.forward(tiny_theta, images, mode="inference")
        b = model.forward(tiny_theta, images, mode="inference")
        assert np.array_equal(a, b)
        assert tiny_theta.equals(before)

    def test_train_mode_updates_only_running_stats(self, tiny_theta):
        rng = np.random.default_rng(4)
        images = rng.random((2, 1, 16, 16))
        before = tiny_theta.copy()
        model.forward(tiny_theta, images, mode="train",
                      rng=np.random.default_rng(0))
        assert all(np.array_equal(v, dict(before.param_items())[n])
                   for n, v in tiny_theta.param_items())
        changed = any(not np.array_equal(tiny_theta.running_stats[k],
                                         before.running_stats[k])
                      for k in tiny_theta.running_stats)
        assert changed

    def test_wrong_size_rejected(self, tiny_theta):
        with pytest.raises(ContractViolation, match="16x16"):
            model.forward(tiny_theta, np.zeros((1, 1, 32, 32)))


class TestRsdBlock:
    def _block_inputs(self, theta, rng):
        cfg = theta.config
        hw = cfg.input_hw >> cfg.rsd_skip_stage
        features = rng.standard_normal(
            (2, cfg.stage_channels(cfg.encoder_stages), hw, hw))
        skip = rng.standard_normal(
            (2, cfg.stage_channels(cfg.rsd_skip_stage), hw, hw))
        stats = {k[len("rsd."):]: v for k, v in theta.running_stats.items()
                 if k.startswith("rsd.")}
        return features, skip, theta.blocks["rsd"], stats

    def test_output_spatial_matches_skip(self, tiny_theta):
        rng = np.random.default_rng(5)
        features, skip, block, stats = self._block_inputs(tiny_theta, rng)
        out, _, _ = model.rsd_block_forward(features, skip, block, stats)
        assert out.shape[2:] == skip.shape[2:]
        assert out.shape[1] == tiny_theta.config.rsd_out_channels

    def test_spatial_mismatch_rejected(self, tiny_theta):
        rng = np.random.default_rng(5)
        features, skip, block, stats = self._block_inputs(tiny_theta, rng)
        with pytest.raises(ContractViolation, match="spatial"):
            model.rsd_block_forward(features[:, :, :4, :4], skip, block, stats)

    def test_zeroed_fuse_reduces_to_residual_projection(self, tiny_theta):
        rng = np.random.default_rng(6)
        features, skip, block, stats = self._block_inputs(tiny_theta, rng)
        block = {k: np.zeros_like(v) if k.startswith("fuse_") else v.copy()
                 for k, v in block.items()}
        block["fuse_gamma"] = np.ones_like(block["fuse_gamma"])
        out, _, _ = model.rsd_block_forward(features, skip, block, stats)

        x, _ = ops.concat_channels_forward(skip, features)
        res, _ = ops.conv2d_forward(x, block["proj_kernel"],
                                    block["proj_bias"], padding="same")
        res, _, _, _ = ops.batchnorm_forward(
            res, block["proj_gamma"], block["proj_beta"],
            stats["proj_mean"], stats["proj_var"], mode="train")
        assert np.array_equal(out, res)

    def test_block_local_gradient_check(self, tiny_theta):
        rng = np.random.default_rng(7)
        features, skip, block, stats = self._block_inputs(tiny_theta, rng)
        # move away from the all-zero-beta init so relu kinks are not hit
        for k in block:
            block[k] = block[k] + 0.05 * rng.standard_normal(block[k].shape)
        out, _, cache = model.rsd_block_forward(features, skip, block, stats)
        loss, gout = weighted_mean_loss(rng, out.shape)
        gf, gs, grads = model.rsd_block_backward(cache, gout)

        def run():
            return loss(model.rsd_block_forward(features, skip, block,
                                                stats)[0])

        assert max_rel_error(gf, numerical_grad(run, features)) < 1e-5
        assert max_rel_error(gs, numerical_grad(run, skip)) < 1e-5
        for name in ("b1_kernel", "b2_kernel", "fuse_kernel", "proj_kernel",
                     "b1_gamma", "fuse_beta", "b2_bias"):
            assert max_rel_error(grads[name],
                                 numerical_grad(run, block[name])) < 1e-5, name


class TestPredictMask:
    def test_strict_majority_rule(self, tiny_theta):
        rng = np.random.default_rng(8)
        images = rng.random((2, 1, 16, 16))
        probs = model.forward(tiny_theta, images, mode="inference")
        masks = model.predict_mask(tiny_theta, images)
        assert set(np.unique(masks)) <= {0.0, 1.0}
        assert np.array_equal(masks, (probs[:, 1] > probs[:, 0]).astype(float))

    def test_exact_tie_is_background(self):
        # a fresh head with zero kernel and zero bias gives exact 0.5/0.5
        theta = build_model(TINY, np.random.default_rng(9))
        theta.set("head.kernel", np.zeros_like(theta.get("head.kernel")))
        images = np.random.default_rng(10).random((1, 1, 16, 16))
        probs = model.forward(theta, images, mode="inference")
        assert np.allclose(probs[:, 0], 0.5)
        assert np.array_equal(model.predict_mask(theta, images),
                              np.zeros((1, 16, 16)))


class TestEndToEndGradients:
    def test_composite_loss_gradcheck_16x16(self):
        rng = np.random.default_rng(11)
        theta = build_model(TINY, rng)
        # perturb biases/betas so activations straddle their kinks generically
        for name, value in theta.param_items():
            if name.endswith(("bias", "beta")):
                theta.set(name, value + 0.05 * rng.standard_normal(value.shape))
        images = rng.random((2, 1, 16, 16))
        masks = (rng.random((2, 16, 16)) > 0.6).astype(float)
        lam = 1e-3

        def loss_value():
            probs = model.forward(theta, images, mode="train",
                                  rng=np.random.default_rng(99),
                                  dropout_rate=0.2)
            breakdown, _, _ = losses.composite_loss(masks, probs[:, 1], theta,
                                                    lam=lam)
            return breakdown.total

        probs, cache = model.forward(theta, images, mode="train",
                                     rng=np.random.default_rng(99),
                                     dropout_rate=0.2, want_cache=True)
        _, grad_yhat, grad_l2 = losses.composite_loss(masks, probs[:, 1],
                                                      theta, lam=lam)
        grad_probs = np.zeros_like(probs)
        grad_probs[:, 1] = grad_yhat
        grads = model.backward(theta, cache, grad_probs)

        worst = 0.0
        for name, value in theta.param_items():
            analytic = grads[name] + grad_l2[name]
            numeric = numerical_grad(loss_value, value)
            worst = max(worst, max_rel_error(analytic, numeric))
        assert worst < 1e-4


class TestReinitHead:
    def test_only_head_changes(self):
        theta = build_model(ModelConfig(input_hw=16, base_channels=2,
                                        encoder_stages=2, rsd_skip_stage=1,
                                        rsd_out_channels=3,
                                        num_output_channels=5),
                            np.random.default_rng(12))
        new = model.reinit_head(theta, 2, np.random.default_rng(13))
        assert new.config.num_output_channels == 2
        assert new.get("head.kernel").shape[0] == 2
        for name, value in theta.param_items():
            if not name.startswith("head."):
                assert np.array_equal(value, new.get(name))
