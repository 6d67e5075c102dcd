"""Loss terms: hand-derived oracle values, limits and structural properties."""

import numpy as np
import pytest

from rrdispnet.losses import (
    FeatureExtractor,
    LossWeights,
    SSIM_C1,
    ambiguity_loss,
    build_pyramid,
    lr_consistency_loss,
    lr_consistency_terms,
    perceptual_loss,
    reconstruction_loss,
    scale_loss,
    smoothness_loss,
    smoothness_scale_factor,
    ssim,
    total_loss,
)
from rrdispnet.network import ScaleOutputs
from rrdispnet.tensor import Tensor, backward

# luminance-only SSIM of constant 0 vs constant 1 is C1/(1+C1)
CONST_SSIM_DISSIM = 0.5 * (1.0 - SSIM_C1 / (1.0 + SSIM_C1))


def const(shape, value):
    return Tensor(np.full(shape, float(value)))


def smooth_image(rng, c, h, w):
    base = rng.uniform(0.1, 0.9, size=(1, c, h // 4, w // 4))
    img = base.repeat(4, axis=2).repeat(4, axis=3)
    return Tensor(img)


class TestSSIM:
    def test_identical_images_zero(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(0, 1, size=(1, 3, 6, 6)))
        out = ssim(x, Tensor(x.data.copy()))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_constant_zero_vs_one(self):
        x = const((1, 1, 5, 5), 0.0)
        y = const((1, 1, 5, 5), 1.0)
        out = ssim(x, y)
        np.testing.assert_allclose(out.data, CONST_SSIM_DISSIM, rtol=1e-12)
        assert out.data[0, 0, 0, 0] == pytest.approx(0.4999, abs=1e-4)

    def test_range_contract(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = Tensor(rng.uniform(0, 1, size=(1, 2, 5, 7)))
            y = Tensor(rng.uniform(0, 1, size=(1, 2, 5, 7)))
            out = ssim(x, y).data
            assert out.min() >= 0.0 and out.max() <= 1.0


class TestReconstructionLoss:
    def test_perfect_reconstruction_zero(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.uniform(0, 1, size=(1, 3, 6, 6)))
        loss = reconstruction_loss(x, Tensor(x.data.copy()), LossWeights())
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_alpha_one_is_mae(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(0, 1, size=(1, 3, 6, 6)))
        y = Tensor(rng.uniform(0, 1, size=(1, 3, 6, 6)))
        loss = reconstruction_loss(x, y, LossWeights(alpha=1.0))
        assert loss.item() == pytest.approx(np.abs(x.data - y.data).mean(), rel=1e-12)

    def test_constant_images_hand_value(self):
        x = const((1, 3, 6, 6), 0.0)
        y = const((1, 3, 6, 6), 1.0)
        loss = reconstruction_loss(x, y, LossWeights())
        expected = 0.85 * 1.0 + 0.15 * CONST_SSIM_DISSIM
        assert loss.item() == pytest.approx(expected, rel=1e-12)
        assert loss.item() == pytest.approx(0.925, abs=1e-3)


class TestSmoothnessLoss:
    def test_constant_disparity_zero(self):
        img = Tensor(np.random.default_rng(4).uniform(0, 1, size=(1, 3, 4, 6)))
        loss = smoothness_loss(const((1, 1, 4, 6), 2.5), img)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_unit_ramp_hand_sum(self):
        # 2x3 unit-slope ramp, constant image: x-differences of d/w are all
        # 1/3, y-differences 0, so the loss is exactly 1/3.
        d = Tensor(np.tile(np.arange(3.0), (1, 1, 2, 1)))
        img = const((1, 1, 2, 3), 0.5)
        loss = smoothness_loss(d, img)
        assert loss.item() == pytest.approx(1.0 / 3.0, rel=1e-12)

    def test_image_edge_suppresses_penalty(self):
        d = Tensor(np.tile(np.array([0.0, 0.0, 4.0, 4.0]), (1, 1, 4, 1)))
        flat = const((1, 3, 4, 4), 0.5)
        edge_data = np.full((1, 3, 4, 4), 0.5)
        edge_data[:, :, :, 2:] = 60.0  # enormous gradient exactly at the jump
        with_edge = smoothness_loss(d, Tensor(edge_data))
        without = smoothness_loss(d, flat)
        assert with_edge.item() < 1e-6 * without.item()


class TestPerceptualLoss:
    def setup_method(self):
        self.fx = FeatureExtractor(widths=(8, 12, 16), seed=5)

    def test_identical_zero(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)).astype(np.float32))
        loss = perceptual_loss(x, Tensor(x.data.copy()), self.fx)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_non_negative(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            x = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)).astype(np.float32))
            y = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)).astype(np.float32))
            assert perceptual_loss(x, y, self.fx).item() >= 0.0

    def test_pixel_permutation_increases_loss(self):
        rng = np.random.default_rng(8)
        img = smooth_image(rng, 3, 16, 16)
        flat = img.data.reshape(1, 3, -1)
        perm = rng.permutation(flat.shape[2])
        shuffled = Tensor(flat[:, :, perm].reshape(img.shape))
        loss = perceptual_loss(img, shuffled, self.fx)
        assert loss.item() > 0.0

    def test_too_small_rejected(self):
        x = Tensor(np.zeros((1, 3, 2, 8)))
        with pytest.raises(ValueError, match="divisible by 4"):
            perceptual_loss(x, x, self.fx)

    def test_gradient_reaches_reconstruction_only(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)), requires_grad=True)
        y = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)), requires_grad=True)
        fx = FeatureExtractor(widths=(4, 6, 8), seed=1, dtype=np.float64)
        backward(perceptual_loss(x, y, fx))
        assert x.grad is None or not x.grad.any()
        assert y.grad is not None and np.abs(y.grad).sum() > 0


class TestAmbiguityLoss:
    def test_full_confidence_zero(self):
        ones = const((1, 1, 4, 4), 1.0)
        assert ambiguity_loss(ones, ones).item() == pytest.approx(0.0, abs=1e-12)

    def test_half_mask_hand_value(self):
        half = const((1, 1, 4, 4), 0.5)
        loss = ambiguity_loss(half, Tensor(half.data.copy()))
        assert loss.item() == pytest.approx(2.0 * np.log(2.0), abs=1e-9)

    def test_gradient_pushes_masks_upward(self):
        rng = np.random.default_rng(10)
        mask_l = Tensor(rng.uniform(0.1, 0.9, size=(1, 1, 3, 3)), requires_grad=True)
        mask_r = Tensor(rng.uniform(0.1, 0.9, size=(1, 1, 3, 3)), requires_grad=True)
        backward(ambiguity_loss(mask_l, mask_r))
        assert (mask_l.grad < 0).all() and (mask_r.grad < 0).all()


class TestLRConsistency:
    def test_equal_constant_fields_zero(self):
        d = const((1, 1, 4, 10), 1.5)
        ones = const((1, 1, 4, 10), 1.0)
        loss = lr_consistency_loss(d, Tensor(d.data.copy()), ones, ones)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_zero_mask_annihilates(self):
        rng = np.random.default_rng(11)
        d_l = Tensor(rng.uniform(0, 2, size=(1, 1, 4, 10)))
        d_r = Tensor(rng.uniform(0, 2, size=(1, 1, 4, 10)))
        zeros = const((1, 1, 4, 10), 0.0)
        assert lr_consistency_loss(d_l, d_r, zeros, zeros).item() == 0.0

    def test_constant_field_hand_value(self):
        d_l = const((1, 1, 4, 10), 2.0)
        d_r = const((1, 1, 4, 10), 0.0)
        ones = const((1, 1, 4, 10), 1.0)
        left, right = lr_consistency_terms(d_l, d_r, ones, ones)
        assert left.item() == pytest.approx(2.0, abs=1e-9)
        assert right.item() == pytest.approx(2.0, abs=1e-9)
        assert lr_consistency_loss(d_l, d_r, ones, ones).item() == pytest.approx(4.0, abs=1e-9)


def make_outputs(rng, w, h, disp_value=None, mask_value=None):
    def map_of(value, lo, hi):
        if value is None:
            return Tensor(rng.uniform(lo, hi, size=(1, 1, h, w)))
        return const((1, 1, h, w), value)

    return ScaleOutputs(
        disp_left=map_of(disp_value, 0.1, 0.3 * w / 2),
        disp_right=map_of(disp_value, 0.1, 0.3 * w / 2),
        mask_left=map_of(mask_value, 0.2, 0.8),
        mask_right=map_of(mask_value, 0.2, 0.8),
    )


class TestScaleAndTotalLoss:
    def test_smoothness_scale_factor(self):
        assert smoothness_scale_factor(0) == pytest.approx(0.2, abs=1e-15)
        assert LossWeights().ds * smoothness_scale_factor(0) == pytest.approx(0.02, abs=1e-12)
        for s in range(4):
            ratio = smoothness_scale_factor(s + 1) / smoothness_scale_factor(s)
            assert ratio == pytest.approx(0.5, abs=1e-15)

    def test_all_weights_zero(self):
        rng = np.random.default_rng(12)
        img = smooth_image(rng, 3, 8, 16)
        weights = LossWeights(rec=0, ds=0, p=0, a=0, lr=0)
        outs = make_outputs(rng, 16, 8)
        loss, comps = scale_loss(0, outs, img, img, weights, None)
        assert loss.item() == 0.0
        assert all(v == 0.0 for v in comps.values())

    def test_perfect_setup_gives_zero(self):
        img = const((1, 3, 8, 16), 0.5)
        rng = np.random.default_rng(13)
        outs = make_outputs(rng, 16, 8, disp_value=1.25, mask_value=1.0)
        fx = FeatureExtractor(widths=(4, 6, 8), seed=2)
        loss, _ = scale_loss(0, outs, img, Tensor(img.data.copy()), LossWeights(), fx)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_terms_non_negative_and_zero_only_when_all_zero(self):
        rng = np.random.default_rng(14)
        img_l = smooth_image(rng, 3, 8, 16)
        img_r = smooth_image(rng, 3, 8, 16)
        fx = FeatureExtractor(widths=(4, 6, 8), seed=3)
        outs = make_outputs(rng, 16, 8)
        loss, comps = scale_loss(1, outs, img_l, img_r, LossWeights(), fx)
        assert all(v >= 0.0 for v in comps.values())
        assert loss.item() == pytest.approx(sum(comps.values()), rel=1e-6)
        assert loss.item() > 0.0

    def test_collapsed_masks_leave_only_ambiguity_and_smoothness(self):
        rng = np.random.default_rng(15)
        img_l = smooth_image(rng, 3, 8, 16)
        img_r = smooth_image(rng, 3, 8, 16)
        fx = FeatureExtractor(widths=(4, 6, 8), seed=4)
        outs = make_outputs(rng, 16, 8, mask_value=0.0)
        _, comps = scale_loss(0, outs, img_l, img_r, LossWeights(), fx)
        assert comps["rec"] == pytest.approx(0.0, abs=1e-9)
        assert comps["perceptual"] == pytest.approx(0.0, abs=1e-9)
        assert comps["lr_consistency"] == pytest.approx(0.0, abs=1e-9)
        assert comps["ambiguity"] > 1.0  # the collapse penalty

    def test_total_is_sum_of_scales(self):
        rng = np.random.default_rng(16)
        img_l = smooth_image(rng, 3, 32, 64)
        img_r = smooth_image(rng, 3, 32, 64)
        pyr_l = build_pyramid(img_l, 4)
        pyr_r = build_pyramid(img_r, 4)
        fx = FeatureExtractor(widths=(4, 6, 8), seed=5)
        outs = [make_outputs(rng, 64 // 2 ** s, 32 // 2 ** s) for s in range(4)]
        weights = LossWeights()
        total, _ = total_loss(outs, pyr_l, pyr_r, weights, fx)
        per_scale = sum(
            scale_loss(s, outs[s], pyr_l[s], pyr_r[s], weights, fx)[0].item()
            for s in range(4)
        )
        assert total.item() == pytest.approx(per_scale, rel=1e-6)

    def test_missing_scale_rejected(self):
        rng = np.random.default_rng(17)
        img = smooth_image(rng, 3, 16, 32)
        pyr = build_pyramid(img, 4)
        outs = [make_outputs(rng, 32 // 2 ** s, 16 // 2 ** s) for s in range(3)]
        with pytest.raises(ValueError, match="scale"):
            total_loss(outs, pyr, pyr, LossWeights(), None)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            LossWeights(ds=-0.1)
