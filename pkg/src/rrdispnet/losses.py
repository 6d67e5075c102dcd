"""The five-term training objective, applied at the four finest scales.

Per scale, the loss is a weighted sum of photometric reconstruction
(L1 + SSIM), edge-aware disparity smoothness, perceptual feature distance,
an ambiguity cross-entropy that keeps the masks from collapsing to zero,
and a masked left-right disparity consistency term. Each term has a left
and a right component, summed. All L1 norms are implemented as means so the
weights stay meaningful across resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ScaleOutputs
from .tensor import (
    ParamStore,
    Tensor,
    abs_,
    avg_pool2x,
    avg_pool3x3_valid,
    clamp,
    conv2d,
    crop,
    exp,
    log,
    mean_channels,
    reduce_mean,
    relu,
    scalar_mul,
)
from .warp import (
    reconstruct_left,
    reconstruct_right,
    warp_left_to_right,
    warp_right_to_left,
)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    """Term weights; the defaults are the calibrated training values."""

    rec: float = 1.0
    ds: float = 0.1
    p: float = 0.1
    a: float = 0.2
    lr: float = 1.0
    alpha: float = 0.85

    def __post_init__(self):
        for name in ("rec", "ds", "p", "a", "lr", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


class FeatureExtractor:
    """Three frozen convolutional stages used by the perceptual loss.

    The stages mirror the geometry of the first three feature depths of a
    VGG-style backbone (2 convs at full resolution, 2 at half, 4 at quarter)
    with channel widths (64, 128, 256) by default. Weights are seeded and
    never trained; a weight file in the checkpoint container format can
    replace them.
    """

    STAGE_CONVS = (2, 2, 4)

    def __init__(self, widths: tuple[int, int, int] = (64, 128, 256), seed: int = 7,
                 dtype=np.float32):
        self.widths = tuple(widths)
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        c_in = 3
        self._convs: list[list[tuple[Tensor, Tensor]]] = []
        for stage, (width, n_convs) in enumerate(zip(self.widths, self.STAGE_CONVS)):
            stage_convs = []
            for k in range(n_convs):
                fan_in = c_in * 9
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(width, c_in, 3, 3))
                wt = self.params.add(f"stage{stage}.conv{k}.weight", w.astype(dtype))
                bt = self.params.add(f"stage{stage}.conv{k}.bias", np.zeros(width, dtype=dtype))
                stage_convs.append((wt, bt))
                c_in = width
            self._convs.append(stage_convs)
        for t in self.params.tensors():
            t.requires_grad = False

    @property
    def min_size(self) -> int:
        return 4

    def __call__(self, img: Tensor) -> list[Tensor]:
        n, c, h, w = img.shape
        if h % 4 or w % 4 or h < self.min_size or w < self.min_size:
            raise ValueError(
                f"feature extractor needs spatial dims divisible by 4 and >= "
                f"{self.min_size}, got ({h}, {w})"
            )
        feats = []
        x = img
        for stage, stage_convs in enumerate(self._convs):
            if stage > 0:
                x = avg_pool2x(x)
            for wt, bt in stage_convs:
                x = relu(conv2d(x, wt, bt, (1, 1), (1, 1)))
            feats.append(x)
        return feats


def ssim(x: Tensor, y: Tensor) -> Tensor:
    """Per-pixel SSIM dissimilarity, clamp((1 - SSIM)/2, 0, 1).

    Statistics use 3x3 mean windows without padding, so the output shrinks
    by two pixels per axis. Inputs are expected in [0, 1].
    """
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes differ, {x.shape} vs {y.shape}")
    mu_x = avg_pool3x3_valid(x)
    mu_y = avg_pool3x3_valid(y)
    sigma_x = avg_pool3x3_valid(x * x) - mu_x * mu_x
    sigma_y = avg_pool3x3_valid(y * y) - mu_y * mu_y
    sigma_xy = avg_pool3x3_valid(x * y) - mu_x * mu_y
    num = (scalar_mul(mu_x * mu_y, 2.0) + SSIM_C1) * (scalar_mul(sigma_xy, 2.0) + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return clamp(scalar_mul(1.0 - num / den, 0.5), 0.0, 1.0)


def reconstruction_loss(img: Tensor, recon: Tensor, weights: LossWeights) -> Tensor:
    """alpha-weighted mix of mean absolute error and SSIM dissimilarity."""
    l1 = reduce_mean(abs_(img - recon))
    dssim = reduce_mean(ssim(img, recon))
    return scalar_mul(l1, weights.alpha) + scalar_mul(dssim, 1.0 - weights.alpha)


def smoothness_loss(disp: Tensor, img: Tensor) -> Tensor:
    """Edge-aware first-order smoothness of the width-normalized disparity.

    Forward differences; the penalty decays with the image gradient
    magnitude (channel mean) so disparity edges are free where the image
    has edges.
    """
    n, _, h, w = disp.shape
    if img.shape[2] != h or img.shape[3] != w:
        raise ValueError(f"smoothness: disparity {disp.shape} vs image {img.shape}")
    d = scalar_mul(disp, 1.0 / w)
    terms = []
    if w > 1:
        dx = abs_(crop(d, 0, h, 1, w) - crop(d, 0, h, 0, w - 1))
        gx = mean_channels(abs_(crop(img, 0, h, 1, w) - crop(img, 0, h, 0, w - 1)))
        terms.append(reduce_mean(dx * exp(-gx)))
    if h > 1:
        dy = abs_(crop(d, 1, h, 0, w) - crop(d, 0, h - 1, 0, w))
        gy = mean_channels(abs_(crop(img, 1, h, 0, w) - crop(img, 0, h - 1, 0, w)))
        terms.append(reduce_mean(dy * exp(-gy)))
    if not terms:
        return reduce_mean(scalar_mul(d, 0.0))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def perceptual_loss(img: Tensor, recon: Tensor, extractor: FeatureExtractor) -> Tensor:
    """Sum over the extractor stages of the mean absolute feature difference.

    The reference image enters without gradient, so gradients flow only to
    the reconstruction.
    """
    ref = extractor(img if not img.requires_grad else img.detach())
    out = extractor(recon)
    total = None
    for f_ref, f_out in zip(ref, out):
        term = reduce_mean(abs_(f_ref - f_out))
        total = term if total is None else total + term
    return total


def ambiguity_loss(mask_left: Tensor, mask_right: Tensor) -> Tensor:
    """Cross entropy against all-ones: mean(-log m) per side, summed.

    Raw (not dis-occlusion-combined) masks; without this term the masks
    would sink to zero and switch every other loss off.
    """
    left = scalar_mul(reduce_mean(log(mask_left)), -1.0)
    right = scalar_mul(reduce_mean(log(mask_right)), -1.0)
    return left + right


def lr_consistency_terms(
    disp_left: Tensor,
    disp_right: Tensor,
    cmask_left: Tensor,
    cmask_right: Tensor,
) -> tuple[Tensor, Tensor]:
    """Per-side masked disparity agreement: each view's disparity versus the
    other view's disparity warped into it."""
    right_in_left = warp_right_to_left(disp_right, disp_left)
    left_term = reduce_mean(cmask_left * abs_(disp_left - right_in_left))
    left_in_right = warp_left_to_right(disp_left, disp_right)
    right_term = reduce_mean(cmask_right * abs_(disp_right - left_in_right))
    return left_term, right_term


def lr_consistency_loss(
    disp_left: Tensor,
    disp_right: Tensor,
    cmask_left: Tensor,
    cmask_right: Tensor,
) -> Tensor:
    left_term, right_term = lr_consistency_terms(
        disp_left, disp_right, cmask_left, cmask_right
    )
    return left_term + right_term


def smoothness_scale_factor(s: int) -> float:
    """The extra per-scale attenuation on the smoothness term, 0.1 / 2**(s-1)."""
    return 0.1 / 2.0 ** (s - 1)


def scale_loss(
    s: int,
    outputs: ScaleOutputs,
    img_left: Tensor,
    img_right: Tensor,
    weights: LossWeights,
    extractor: FeatureExtractor | None,
) -> tuple[Tensor, dict[str, float]]:
    """The weighted five-term loss at one scale.

    Returns the scalar loss and the weighted contribution of each term
    (floats, for logging). The perceptual term needs an extractor unless its
    weight is zero.
    """
    recon_l, cmask_l = reconstruct_left(
        img_left, img_right, outputs.disp_left, outputs.mask_left
    )
    recon_r, cmask_r = reconstruct_right(
        img_left, img_right, outputs.disp_right, outputs.mask_right
    )

    rec = reconstruction_loss(img_left, recon_l, weights) + reconstruction_loss(
        img_right, recon_r, weights
    )
    ds = smoothness_loss(outputs.disp_left, img_left) + smoothness_loss(
        outputs.disp_right, img_right
    )
    amb = ambiguity_loss(outputs.mask_left, outputs.mask_right)
    lr = lr_consistency_loss(
        outputs.disp_left, outputs.disp_right, cmask_l, cmask_r
    )

    ds_w = weights.ds * smoothness_scale_factor(s)
    total = (
        scalar_mul(rec, weights.rec)
        + scalar_mul(ds, ds_w)
        + scalar_mul(amb, weights.a)
        + scalar_mul(lr, weights.lr)
    )
    components = {
        "rec": weights.rec * rec.item(),
        "smooth": ds_w * ds.item(),
        "perceptual": 0.0,
        "ambiguity": weights.a * amb.item(),
        "lr_consistency": weights.lr * lr.item(),
    }
    if weights.p > 0:
        if extractor is None:
            raise ValueError("perceptual weight is nonzero but no extractor given")
        perc = perceptual_loss(img_left, recon_l, extractor) + perceptual_loss(
            img_right, recon_r, extractor
        )
        total = total + scalar_mul(perc, weights.p)
        components["perceptual"] = weights.p * perc.item()
    return total, components


def build_pyramid(img: Tensor, levels: int) -> list[Tensor]:
    """Area-downsampled image pyramid, finest first."""
    pyr = [img]
    for _ in range(levels - 1):
        pyr.append(avg_pool2x(pyr[-1]))
    return pyr


def total_loss(
    outputs: list[ScaleOutputs],
    pyramid_left: list[Tensor],
    pyramid_right: list[Tensor],
    weights: LossWeights,
    extractor: FeatureExtractor | None,
    num_scales: int = 4,
) -> tuple[Tensor, dict[str, float]]:
    """Sum of the per-scale losses over the finest ``num_scales`` scales."""
    if len(outputs) < num_scales:
        raise ValueError(f"need {num_scales} scale outputs, got {len(outputs)}")
    if len(pyramid_left) < num_scales or len(pyramid_right) < num_scales:
        raise ValueError(f"image pyramids must have {num_scales} levels")
    total: Tensor | None = None
    components = {
        "rec": 0.0,
        "smooth": 0.0,
        "perceptual": 0.0,
        "ambiguity": 0.0,
        "lr_consistency": 0.0,
    }
    for s in range(num_scales):
        ls, comps = scale_loss(
            s, outputs[s], pyramid_left[s], pyramid_right[s], weights, extractor
        )
        total = ls if total is None else total + ls
        for key, value in comps.items():
            components[key] += value
    assert total is not None
    return total, components
