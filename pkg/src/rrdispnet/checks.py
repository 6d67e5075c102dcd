"""Finite-difference verification of every differentiable operation.

Each check compares the analytic gradient of a scalar projection of an op
against central finite differences on small randomized float64 tensors.
Random draws deliberately avoid the measure-zero kinks (abs/ELU at zero,
integer sampling coordinates, clamp boundaries) where one-sided derivatives
differ.
"""

from __future__ import annotations

import numpy as np

from .losses import (
    FeatureExtractor,
    LossWeights,
    ambiguity_loss,
    build_pyramid,
    lr_consistency_loss,
    perceptual_loss,
    reconstruction_loss,
    smoothness_loss,
    ssim,
    total_loss,
)
from .network import ScaleOutputs
from .tensor import (
    GradCheckReport,
    Tensor,
    abs_,
    avg_pool2x,
    bilinear_hsample,
    clamp,
    concat_channels,
    conv2d,
    crop,
    div,
    downsample_area,
    elu,
    exp,
    grad_check,
    log,
    mean_channels,
    mul,
    nearest_upsample2x,
    reduce_mean,
    reduce_sum,
    relu,
    scalar_mul,
    sigmoid,
)
from .warp import reconstruct_left

EPS = 1e-5
TOL = 1e-4


def _proj(op, like_shape, rng):
    """Make op scalar-valued via a fixed random projection."""
    v = Tensor(rng.uniform(-1.0, 1.0, size=like_shape))

    def f(x):
        return reduce_sum(op(x) * v)

    return f


def gradient_suite(seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    reports: list[tuple[str, GradCheckReport]] = []

    def run(name, f, at):
        reports.append((name, grad_check(f, at, eps=EPS, tol=TOL)))

    def rand(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape))

    # elementwise set
    x = rand((2, 3, 4, 5))
    other = rand((2, 3, 4, 5))
    run("add", _proj(lambda t: t + other, x.shape, rng), x)
    run("sub", _proj(lambda t: t - other, x.shape, rng), x)
    run("mul", _proj(lambda t: mul(t, other), x.shape, rng), x)
    run("div", _proj(lambda t: div(t, other + 3.0), x.shape, rng), x)
    run("scalar_mul", _proj(lambda t: scalar_mul(t, -1.7), x.shape, rng), x)
    x_away = rand((2, 3, 4, 5), lo=0.2, hi=1.0)
    sign = Tensor(np.where(rng.random((2, 3, 4, 5)) < 0.5, -1.0, 1.0))
    run("abs", _proj(lambda t: abs_(mul(t, sign)), x.shape, rng), x_away)
    run("exp", _proj(exp, x.shape, rng), x)
    run("log", _proj(log, x.shape, rng), rand((2, 3, 4, 5), lo=0.1, hi=2.0))
    run("sigmoid", _proj(sigmoid, x.shape, rng), x)
    run("elu", _proj(elu, x.shape, rng), x_away)
    run("relu", _proj(relu, x.shape, rng), x_away)
    run("clamp", _proj(lambda t: clamp(t, -0.15, 0.15), x.shape, rng), x)

    # structural ops
    run(
        "nearest_upsample2x",
        _proj(nearest_upsample2x, (2, 3, 8, 10), rng),
        rand((2, 3, 4, 5)),
    )
    run("avg_pool2x", _proj(avg_pool2x, (2, 3, 2, 3), rng), rand((2, 3, 4, 6)))
    run(
        "downsample_area",
        _proj(lambda t: downsample_area(t, 4), (1, 2, 1, 2), rng),
        rand((1, 2, 4, 8)),
    )
    run(
        "concat_channels",
        _proj(lambda t: concat_channels([t, other]), (2, 6, 4, 5), rng),
        x,
    )
    run("crop", _proj(lambda t: crop(t, 1, 3, 1, 4), (2, 3, 2, 3), rng), x)
    run("mean_channels", _proj(mean_channels, (2, 1, 4, 5), rng), x)
    run("reduce_mean", reduce_mean, x)

    # convolution
    conv_x = rand((2, 3, 6, 8))
    conv_w = rand((4, 3, 3, 5), lo=-0.5, hi=0.5)
    conv_b = rand((4,), lo=-0.2, hi=0.2)
    out_shape = (2, 4, 3, 8)

    run(
        "conv2d/input",
        _proj(lambda t: conv2d(t, conv_w, conv_b, (2, 1), (1, 2)), out_shape, rng),
        conv_x,
    )
    run(
        "conv2d/weight",
        _proj(lambda t: conv2d(conv_x, t, conv_b, (2, 1), (1, 2)), out_shape, rng),
        conv_w,
    )
    run(
        "conv2d/bias",
        _proj(lambda t: conv2d(conv_x, conv_w, t, (2, 1), (1, 2)), out_shape, rng),
        conv_b,
    )

    # bilinear sampling; offsets kept away from integer coordinates
    img = rand((1, 2, 4, 6), lo=0.0, hi=1.0)
    offsets = Tensor(rng.uniform(0.2, 0.8, size=(1, 1, 4, 6)) + rng.integers(0, 2, size=(1, 1, 4, 6)))
    run(
        "bilinear_hsample/image",
        _proj(lambda t: bilinear_hsample(t, offsets), img.shape, rng),
        img,
    )
    run(
        "bilinear_hsample/offsets",
        _proj(lambda t: bilinear_hsample(img, t), img.shape, rng),
        offsets,
    )

    # SSIM and the loss terms
    a_img = rand((1, 3, 6, 8), lo=0.1, hi=0.9)
    b_img = rand((1, 3, 6, 8), lo=0.1, hi=0.9)
    weights = LossWeights()
    run("ssim", _proj(lambda t: ssim(a_img, t), (1, 3, 4, 6), rng), b_img)
    run(
        "reconstruction_loss",
        lambda t: reconstruction_loss(a_img, t, weights),
        b_img,
    )
    disp = Tensor(rng.uniform(0.3, 1.7, size=(1, 1, 6, 8)))
    run("smoothness_loss", lambda t: smoothness_loss(t, a_img), disp)

    tiny_fx = FeatureExtractor(widths=(6, 8, 10), seed=11, dtype=np.float64)
    p_img = rand((1, 3, 4, 8), lo=0.1, hi=0.9)
    run(
        "perceptual_loss",
        lambda t: perceptual_loss(p_img, t, tiny_fx),
        rand((1, 3, 4, 8), lo=0.1, hi=0.9),
    )

    mask_l = Tensor(rng.uniform(0.1, 0.9, size=(1, 1, 4, 6)))
    mask_r = Tensor(rng.uniform(0.1, 0.9, size=(1, 1, 4, 6)))
    run("ambiguity_loss", lambda t: ambiguity_loss(t, mask_r), mask_l)

    d_l = Tensor(rng.uniform(0.2, 1.8, size=(1, 1, 4, 6)))
    d_r = Tensor(rng.uniform(0.2, 1.8, size=(1, 1, 4, 6)))
    run(
        "lr_consistency/disp_left",
        lambda t: lr_consistency_loss(t, d_r, mask_l, mask_r),
        d_l,
    )
    run(
        "lr_consistency/disp_right",
        lambda t: lr_consistency_loss(d_l, t, mask_l, mask_r),
        d_r,
    )
    run(
        "lr_consistency/mask",
        lambda t: lr_consistency_loss(d_l, d_r, t, mask_r),
        mask_l,
    )

    # masked reconstruction (composite of warp, masks and blending)
    rec_il = rand((1, 3, 4, 6), lo=0.1, hi=0.9)
    rec_ir = rand((1, 3, 4, 6), lo=0.1, hi=0.9)
    rec_d = Tensor(rng.uniform(0.2, 0.8, size=(1, 1, 4, 6)))
    rec_m = Tensor(rng.uniform(0.2, 0.8, size=(1, 1, 4, 6)))
    run(
        "reconstruct_left/disparity",
        _proj(lambda t: reconstruct_left(rec_il, rec_ir, t, rec_m)[0], rec_il.shape, rng),
        rec_d,
    )
    run(
        "reconstruct_left/mask",
        _proj(lambda t: reconstruct_left(rec_il, rec_ir, rec_d, t)[0], rec_il.shape, rng),
        rec_m,
    )

    # the whole objective, perturbing the coarsest-scale disparity logits
    reports.append(("total_loss/disparity_logit", _total_loss_check(rng)))
    return reports


def _total_loss_check(rng: np.random.Generator) -> GradCheckReport:
    h, w = 32, 64
    num_scales = 4
    img_l = Tensor(_smooth_image(rng, h, w))
    img_r = Tensor(_smooth_image(rng, h, w))
    pyr_l = build_pyramid(img_l, num_scales)
    pyr_r = build_pyramid(img_r, num_scales)
    weights = LossWeights()
    fx = FeatureExtractor(widths=(4, 6, 8), seed=3, dtype=np.float64)

    fixed: list[dict[str, np.ndarray]] = []
    for s in range(num_scales):
        hs, ws = h // 2 ** s, w // 2 ** s
        fixed.append(
            {
                "disp_left": rng.uniform(0.1, 0.25, size=(1, 1, hs, ws)) * ws * 0.3,
                "disp_right": rng.uniform(0.1, 0.25, size=(1, 1, hs, ws)) * ws * 0.3,
                "mask_left": rng.uniform(0.3, 0.7, size=(1, 1, hs, ws)),
                "mask_right": rng.uniform(0.3, 0.7, size=(1, 1, hs, ws)),
            }
        )

    coarse_w = w // 2 ** (num_scales - 1)

    def f(logits: Tensor) -> Tensor:
        outputs = []
        for s in range(num_scales):
            maps = fixed[s]
            if s == num_scales - 1:
                disp_left = scalar_mul(sigmoid(logits), 0.3 * coarse_w)
            else:
                disp_left = Tensor(maps["disp_left"])
            outputs.append(
                ScaleOutputs(
                    disp_left=disp_left,
                    disp_right=Tensor(maps["disp_right"]),
                    mask_left=Tensor(maps["mask_left"]),
                    mask_right=Tensor(maps["mask_right"]),
                )
            )
        return total_loss(outputs, pyr_l, pyr_r, weights, fx, num_scales)[0]

    logits = Tensor(rng.uniform(-1.2, -0.4, size=(1, 1, h // 2 ** 3, w // 2 ** 3)))
    return grad_check(f, logits, eps=EPS, tol=TOL)


def _smooth_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Low-frequency random texture in (0.05, 0.95), float64."""
    base = rng.uniform(0.1, 0.9, size=(1, 3, h // 8, w // 8))
    img = Tensor(base)
    for _ in range(3):
        img = nearest_upsample2x(img)
    out = avg_pool2x(nearest_upsample2x(img)).data
    return np.clip(out, 0.05, 0.95)


def run_gradient_suite(seed: int = 0, verbose: bool = True) -> bool:
    reports = gradient_suite(seed)
    all_passed = True
    for name, report in reports:
        all_passed &= report.passed
        if verbose:
            status = "ok  " if report.passed else "FAIL"
            print(
                f"[{status}] {name:30s} n={report.n_elements:4d} "
                f"max_rel={report.max_rel_err:.2e}"
            )
    return all_passed
