"""Loss values against hand computations, and gradient checks of both losses."""

import math

import numpy as np
import pytest

from ognet.losses import EPS, LossWeights, iaf_loss, iaf_loss_hard, side_cross_entropy, total_loss
from ognet.network import SaliencyOutputs
from ognet.tensor import Tensor, bilinear_resize, grad_check, sigmoid


def logit(p):
    return math.log(p / (1.0 - p))


class TestSideCrossEntropy:
    def test_saturated_correct_prediction_vanishes(self):
        gt = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
        logits = Tensor(np.where(gt > 0.5, 40.0, -40.0))
        assert side_cross_entropy(logits, gt).item() < 1e-15

    def test_zero_logits_give_ln2(self):
        gt = np.array([[1.0, 0.0], [1.0, 1.0]]).reshape(1, 1, 2, 2)
        loss = side_cross_entropy(Tensor(np.zeros((1, 1, 2, 2))), gt)
        assert loss.item() == pytest.approx(math.log(2.0), rel=1e-12)

    def test_two_by_two_hand_values(self):
        gt = np.array([[1.0, 0.0], [1.0, 0.0]]).reshape(1, 1, 2, 2)
        p = np.array([[0.9, 0.1], [0.6, 0.4]])
        logits = Tensor(np.vectorize(logit)(p).reshape(1, 1, 2, 2))
        expect = np.mean([-math.log(0.9), -math.log(0.9), -math.log(0.6), -math.log(0.6)])
        assert side_cross_entropy(logits, gt).item() == pytest.approx(expect, rel=1e-10)

    def test_logits_resized_to_gt_resolution(self):
        gt = np.ones((1, 1, 4, 4))
        logits = Tensor(np.full((1, 1, 2, 2), 2.0))
        direct = side_cross_entropy(Tensor(np.full((1, 1, 4, 4), 2.0)), gt)
        resized = side_cross_entropy(logits, gt)
        assert resized.item() == pytest.approx(direct.item(), rel=1e-12)

    def test_non_binary_gt_rejected(self):
        with pytest.raises(ValueError):
            side_cross_entropy(Tensor(np.zeros((1, 1, 2, 2))), np.full((1, 1, 2, 2), 0.5))

    def test_nonnegative_random(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            gt = (rng.random((1, 1, 3, 3)) > 0.5).astype(float)
            loss = side_cross_entropy(Tensor(rng.normal(size=(1, 1, 3, 3))), gt)
            assert loss.item() >= 0.0

    def test_gradient_check(self):
        rng = np.random.default_rng(1)
        gt = (rng.random((1, 1, 3, 3)) > 0.5).astype(float)
        x = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        assert grad_check(lambda t: side_cross_entropy(t, gt), [x]) < 1e-4


def relaxed_f(p, g, mask, beta_sq):
    """Independent relaxed F computation for the equivalence oracle."""
    p, g, m = p.reshape(-1), g.reshape(-1), mask.reshape(-1).astype(float)
    tp = float((p * g * m).sum())
    prec = tp / (float((p * m).sum()) + EPS)
    rec = tp / (float((g * m).sum()) + EPS)
    return (1 + beta_sq) * prec * rec / (beta_sq * prec + rec + EPS)


class TestIafLoss:
    def test_perfect_prediction_vanishes(self):
        g = np.array([[1.0, 0.0], [1.0, 1.0]]).reshape(1, 1, 2, 2)
        mask = np.ones_like(g, dtype=bool)
        loss = iaf_loss(Tensor(g.copy()), g, mask)
        assert loss.item() < 1e-7

    def test_four_pixel_hand_case(self):
        p = np.array([1.0, 1.0, 0.0, 0.0]).reshape(1, 1, 2, 2)
        g = np.array([1.0, 0.0, 1.0, 0.0]).reshape(1, 1, 2, 2)
        mask = np.ones_like(g, dtype=bool)
        loss = iaf_loss(Tensor(p), g, mask, beta_sq=0.3)
        assert loss.item() == pytest.approx(0.5, abs=1e-7)

    def test_empty_mask_returns_none(self):
        g = np.ones((1, 1, 2, 2))
        assert iaf_loss(Tensor(g.copy()), g, np.zeros_like(g, dtype=bool)) is None

    def test_full_mask_equals_one_minus_global_relaxed_f(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            p = rng.random((1, 1, 3, 4))
            g = (rng.random((1, 1, 3, 4)) > 0.4).astype(float)
            mask = np.ones_like(g, dtype=bool)
            loss = iaf_loss(Tensor(p), g, mask, beta_sq=0.3)
            assert loss.item() == pytest.approx(1.0 - relaxed_f(p, g, mask, 0.3), abs=1e-12)

    def test_bounded_in_unit_interval(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            p = rng.random((1, 1, 3, 3))
            g = (rng.random((1, 1, 3, 3)) > 0.5).astype(float)
            mask = rng.random((1, 1, 3, 3)) > 0.3
            loss = iaf_loss(Tensor(p), g, mask)
            if loss is not None:
                assert 0.0 <= loss.item() <= 1.0

    def test_invariant_to_pixels_outside_mask(self):
        rng = np.random.default_rng(4)
        g = (rng.random((1, 1, 3, 3)) > 0.5).astype(float)
        mask = np.zeros((1, 1, 3, 3), dtype=bool)
        mask[0, 0, 1, 1] = mask[0, 0, 0, 2] = True
        base_logits = rng.normal(size=(1, 1, 3, 3))

        def loss_and_grad(logits_np):
            x = Tensor(logits_np, requires_grad=True)
            loss = iaf_loss(sigmoid(x), g, mask)
            loss.backward()
            return loss.item(), x.grad.copy()

        v1, g1 = loss_and_grad(base_logits)
        outside = base_logits + rng.normal(size=base_logits.shape) * ~mask
        v2, g2 = loss_and_grad(outside)
        assert v1 == pytest.approx(v2, abs=1e-12)
        np.testing.assert_allclose(g1[mask], g2[mask], atol=1e-12)
        assert not g1[~mask].any() and not g2[~mask].any()

    def test_beta_one_symmetric_reduces_to_precision(self):
        # sump == sumg makes P == R, and with beta^2 = 1 the F equals P
        p = np.array([0.5, 0.5, 0.5, 0.5]).reshape(1, 1, 2, 2)
        g = np.array([1.0, 1.0, 0.0, 0.0]).reshape(1, 1, 2, 2)
        mask = np.ones_like(g, dtype=bool)
        loss = iaf_loss(Tensor(p), g, mask, beta_sq=1.0)
        assert 1.0 - loss.item() == pytest.approx(0.5, abs=1e-7)

    def test_hard_variant_binarizes(self):
        p = np.array([0.9, 0.8, 0.2, 0.1]).reshape(1, 1, 2, 2)
        g = np.array([1.0, 0.0, 1.0, 0.0]).reshape(1, 1, 2, 2)
        mask = np.ones_like(g, dtype=bool)
        assert iaf_loss_hard(p, g, mask, beta_sq=0.3) == pytest.approx(0.5, abs=1e-7)

    def test_gradient_check(self):
        rng = np.random.default_rng(5)
        g = (rng.random((1, 1, 3, 3)) > 0.5).astype(float)
        mask = rng.random((1, 1, 3, 3)) > 0.3
        x = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        assert grad_check(lambda t: iaf_loss(sigmoid(t), g, mask), [x]) < 1e-4

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            iaf_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 3, 3)),
                     np.ones((1, 1, 3, 3), dtype=bool))


def outputs_from_logits(logit_arrays):
    logits = [Tensor(a) for a in logit_arrays]
    return SaliencyOutputs(logits, [sigmoid(x) for x in logits])


class TestTotalLoss:
    def test_default_weights(self):
        w = LossWeights.default()
        assert w.alpha == (50.0, 4.0, 4.0, 4.0, 4.0)
        assert w.beta_w == 25.0
        assert w.beta_sq == 0.3

    def test_beta_zero_is_weighted_side_sum(self):
        rng = np.random.default_rng(6)
        gt = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
        arrays = [rng.normal(size=(1, 1, 4 >> i, 4 >> i)) for i in range(2)]
        outs = outputs_from_logits(arrays)
        weights = LossWeights(alpha=(3.0, 2.0), beta_w=0.0)
        total, terms = total_loss(outs, gt, None, weights)
        expect = 3.0 * terms["side1"] + 2.0 * terms["side2"]
        assert total.item() == pytest.approx(expect, rel=1e-12)

    def test_single_output_unit_weight_reduces_to_side_ce(self):
        rng = np.random.default_rng(7)
        gt = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
        arr = rng.normal(size=(1, 1, 4, 4))
        outs = outputs_from_logits([arr])
        total, _ = total_loss(outs, gt, None, LossWeights(alpha=(1.0,), beta_w=0.0))
        direct = side_cross_entropy(Tensor(arr), gt)
        assert total.item() == pytest.approx(direct.item(), rel=1e-12)

    def test_stage2_requires_masks(self):
        rng = np.random.default_rng(8)
        gt = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
        outs = outputs_from_logits([rng.normal(size=(1, 1, 4, 4))])
        with pytest.raises(ValueError):
            total_loss(outs, gt, None, LossWeights(alpha=(1.0,), beta_w=5.0))

    def test_iaf_term_added_and_logged(self):
        rng = np.random.default_rng(9)
        gt = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
        masks = rng.random((2, 1, 4, 4)) > 0.4
        outs = outputs_from_logits([rng.normal(size=(2, 1, 4, 4))])
        weights = LossWeights(alpha=(1.0,), beta_w=2.0)
        total, terms = total_loss(outs, gt, masks, weights)
        assert "iaf" in terms
        assert total.item() == pytest.approx(terms["side1"] + 2.0 * terms["iaf"], rel=1e-10)
        assert total.item() >= 0.0

    def test_empty_masks_skip_iaf_term(self):
        rng = np.random.default_rng(10)
        gt = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
        masks = np.zeros((2, 1, 4, 4), dtype=bool)
        outs = outputs_from_logits([rng.normal(size=(2, 1, 4, 4))])
        total, terms = total_loss(outs, gt, masks, LossWeights(alpha=(1.0,), beta_w=2.0))
        assert math.isnan(terms["iaf"])
        assert total.item() == pytest.approx(terms["side1"], rel=1e-12)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=(1.0, -1.0), beta_w=0.0)

    def test_total_gradient_check(self):
        rng = np.random.default_rng(11)
        gt = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
        masks = rng.random((1, 1, 4, 4)) > 0.4
        x1 = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
        x2 = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        weights = LossWeights(alpha=(5.0, 1.0), beta_w=3.0)

        def build(a, b):
            outs = SaliencyOutputs([a, b], [sigmoid(a), sigmoid(b)])
            return total_loss(outs, gt, masks, weights)[0]

        assert grad_check(build, [x1, x2]) < 1e-4
