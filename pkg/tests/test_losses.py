"""Composite loss pieces and evaluation statistics."""
import math

import numpy as np
import pytest
from scipy import stats as sstats

from metaseg import losses
from metaseg.model import ModelConfig, build_model
from metaseg.ops import ContractViolation

from fd import numerical_grad


class TestBce:
    def test_perfect_prediction_is_clip_level(self):
        y = np.array([1.0, 0.0])
        h = losses.bce(y, y)
        assert abs(h - (-math.log(1.0 - 1e-7))) < 1e-12
        assert h < 2e-7

    def test_half_probability_is_log2(self):
        assert abs(losses.bce(np.array([1.0]), np.array([0.5])) - math.log(2)) < 1e-12

    def test_matches_independent_expression(self):
        rng = np.random.default_rng(0)
        y = (rng.random(200) > 0.5).astype(float)
        yhat = rng.uniform(0.01, 0.99, 200)
        ref = -sum(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)
                   for yi, pi in zip(y, yhat)) / 200
        assert abs(losses.bce(y, yhat) - ref) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        y = (rng.random(50) > 0.5).astype(float)
        yhat = rng.uniform(0.05, 0.95, 50)
        grad = losses.bce_grad(y, yhat)
        num = numerical_grad(lambda: losses.bce(y, yhat), yhat)
        assert np.max(np.abs(grad - num)) < 1e-7


class TestSoftIou:
    def test_identical_binary_masks_give_one(self):
        y = np.array([1.0, 0.0, 1.0, 0.0])
        assert losses.soft_iou(y, y) == 1.0

    def test_two_pixel_hand_value(self):
        eps = 1e-6
        got = losses.soft_iou(np.array([1.0, 1.0]), np.array([1.0, 0.0]), eps=eps)
        expect = (1.0 + eps / (1.0 + eps)) / 2.0
        assert abs(got - expect) < 1e-15
        assert abs(got - 0.5000005) < 1e-7

    def test_all_zeros_give_one(self):
        z = np.zeros(10)
        assert losses.soft_iou(z, z) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        y = rng.random(64)
        yhat = rng.random(64)
        assert abs(losses.soft_iou(y, yhat) - losses.soft_iou(yhat, y)) < 1e-15

    def test_hard_mask_metric_is_one_iff_equal(self):
        rng = np.random.default_rng(3)
        mask = (rng.random((8, 8)) > 0.5).astype(float)
        assert losses.soft_iou(mask, mask) == 1.0
        other = mask.copy()
        other[0, 0] = 1.0 - other[0, 0]
        assert losses.soft_iou(mask, other) < 1.0


class TestDice:
    @pytest.mark.parametrize("iou,expect", [(1.0, 1.0), (0.5, 2.0 / 3.0),
                                            (1.0 / 3.0, 0.5)])
    def test_values(self, iou, expect):
        assert abs(losses.dice_from_iou(iou) - expect) < 1e-15

    def test_nonpositive_rejected(self):
        with pytest.raises(ContractViolation):
            losses.dice_from_iou(0.0)
        with pytest.raises(ContractViolation):
            losses.dice_from_iou(-0.5)

    def test_strictly_increasing_and_bounded(self):
        grid = np.linspace(0.01, 1.0, 100)
        vals = [losses.dice_from_iou(v) for v in grid]
        assert all(b > a for a, b in zip(vals, vals[1:]))
        assert all(v <= 1.0 for v in vals)
        assert vals[-1] == 1.0


class TestCompositeLoss:
    def test_perfect_prediction_near_zero(self):
        y = np.array([1.0, 0.0, 1.0])
        breakdown, _, _ = losses.composite_loss(y, y.copy(), params=None, lam=0.0)
        assert abs(breakdown.total) < 1e-5
        assert breakdown.iou == 1.0

    def test_l2_term_hand_value(self):
        from metaseg.model import ParameterSet
        params = ParameterSet(blocks={"w": {"w": np.array([1.0, 2.0])}})
        rng = np.random.default_rng(4)
        y = (rng.random(20) > 0.5).astype(float)
        yhat = rng.uniform(0.2, 0.8, 20)
        b0, _, _ = losses.composite_loss(y, yhat, params=None, lam=0.0)
        b1, _, g = losses.composite_loss(y, yhat, params=params, lam=0.1)
        assert abs(b1.total - (b0.total + 0.5)) < 1e-12
        assert np.allclose(g["w.w"], 0.2 * np.array([1.0, 2.0]))

    def test_total_invariant(self):
        rng = np.random.default_rng(5)
        y = (rng.random(30) > 0.5).astype(float)
        yhat = rng.uniform(0.1, 0.9, 30)
        breakdown, _, _ = losses.composite_loss(y, yhat, params=None, lam=0.0)
        assert abs(breakdown.total
                   - (breakdown.h - math.log(breakdown.dice))) < 1e-12
        assert abs(breakdown.dice
                   - 2 * breakdown.iou / (breakdown.iou + 1)) < 1e-15

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        y = (rng.random(40) > 0.5).astype(float)
        yhat = rng.uniform(0.1, 0.9, 40)
        _, grad, _ = losses.composite_loss(y, yhat, params=None, lam=0.0)

        def run():
            return losses.composite_loss(y, yhat, params=None, lam=0.0)[0].total

        assert np.max(np.abs(grad - numerical_grad(run, yhat))) < 1e-6

    def test_small_gradient_step_decreases_total(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            y = (rng.random(64) > 0.5).astype(float)
            yhat = rng.uniform(0.1, 0.9, 64)
            b0, grad, _ = losses.composite_loss(y, yhat, params=None, lam=0.0)
            b1, _, _ = losses.composite_loss(y, yhat - 1e-4 * grad,
                                             params=None, lam=0.0)
            assert b1.total <= b0.total

    def test_full_model_l2_excludes_running_stats(self):
        theta = build_model(ModelConfig(input_hw=16, base_channels=2,
                                        encoder_stages=2, rsd_skip_stage=1,
                                        rsd_out_channels=3),
                            np.random.default_rng(8))
        expected = sum(float(np.sum(v * v)) for _, v in theta.param_items())
        assert abs(losses.l2_norm_sq(theta) - expected) < 1e-9
        theta.running_stats["stem.mean"] += 100.0
        assert abs(losses.l2_norm_sq(theta) - expected) < 1e-9


class TestMeanIouCi:
    def test_constant_scores(self):
        mean, half = losses.mean_iou_ci([0.5, 0.5, 0.5])
        assert mean == 0.5 and half == 0.0

    def test_two_point_hand_value(self):
        mean, half = losses.mean_iou_ci([0.0, 1.0])
        assert abs(mean - 0.5) < 1e-15
        assert abs(half - 1.96 * math.sqrt(0.5) / math.sqrt(2)) < 1e-12
        assert abs(half - 0.98) < 1e-12

    def test_matches_independent_statistics_oracle(self):
        rng = np.random.default_rng(9)
        scores = rng.random(100)
        mean, half = losses.mean_iou_ci(scores)
        assert abs(mean - float(np.mean(scores))) < 1e-12
        assert abs(half - 1.96 * sstats.sem(scores)) < 1e-12

    def test_too_few_scores_rejected(self):
        with pytest.raises(ContractViolation):
            losses.mean_iou_ci([0.5])


class TestCrossEntropy:
    def test_matches_manual_value(self):
        probs = np.zeros((1, 3, 1, 2))
        probs[0, :, 0, 0] = (0.7, 0.2, 0.1)
        probs[0, :, 0, 1] = (0.1, 0.8, 0.1)
        onehot = np.zeros_like(probs)
        onehot[0, 0, 0, 0] = 1.0
        onehot[0, 1, 0, 1] = 1.0
        expect = -(math.log(0.7) + math.log(0.8)) / 2.0
        assert abs(losses.cross_entropy(onehot, probs) - expect) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        raw = rng.random((2, 3, 2, 2)) + 0.1
        probs = raw / raw.sum(axis=1, keepdims=True)
        labels = rng.integers(0, 3, (2, 2, 2))
        onehot = np.zeros_like(probs)
        for n in range(2):
            for i in range(2):
                for j in range(2):
                    onehot[n, labels[n, i, j], i, j] = 1.0
        grad = losses.cross_entropy_grad(onehot, probs)
        num = numerical_grad(lambda: losses.cross_entropy(onehot, probs), probs)
        assert np.max(np.abs(grad - num)) < 1e-6
