"""Backward warping, dis-occlusion masks and masked view reconstruction.

Sign convention: a scene point at left-image column ``j`` appears at
right-image column ``j - d``. Reconstructing the left view therefore samples
the right image at ``j - D_L``, and the right view samples the left image at
``j + D_R``.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, bilinear_hsample, scalar_mul


def _check_disparity(d: Tensor) -> None:
    if (d.data < 0).any():
        raise ValueError("disparity map contains negative values")


def warp_right_to_left(right: Tensor, disp_left: Tensor) -> Tensor:
    """Backward-warp the right image into the left view."""
    _check_disparity(disp_left)
    return bilinear_hsample(right, disp_left)


def warp_left_to_right(left: Tensor, disp_right: Tensor) -> Tensor:
    """Backward-warp the left image into the right view (samples at j + d)."""
    _check_disparity(disp_right)
    return bilinear_hsample(left, scalar_mul(disp_right, -1.0))


def disocclusion_masks(width: int, dtype=np.float32) -> tuple[Tensor, Tensor]:
    """Binary masks zeroing the border bands that warping cannot reconstruct.

    The left mask is 0 where the 0-based column index j < 0.15*width, the
    right mask is 0 where j > 0.85*width; the inequalities are evaluated
    literally, with no rounding of the thresholds. Shape (1, 1, 1, width),
    broadcasting over batch and rows.
    """
    if width < 1:
        raise ValueError(f"width must be >= 1, got {width}")
    j = np.arange(width, dtype=np.float64)
    left = (j >= 0.15 * width).astype(dtype).reshape(1, 1, 1, width)
    right = (j <= 0.85 * width).astype(dtype).reshape(1, 1, 1, width)
    return Tensor(left), Tensor(right)


def combined_mask(mask: Tensor, side: str) -> Tensor:
    """Ambiguity mask times the dis-occlusion mask for its view."""
    w = mask.shape[3]
    disocc_l, disocc_r = disocclusion_masks(w, dtype=mask.dtype)
    return mask * (disocc_l if side == "left" else disocc_r)


def reconstruct_left(
    img_left: Tensor,
    img_right: Tensor,
    disp_left: Tensor,
    mask_left: Tensor,
) -> tuple[Tensor, Tensor]:
    """Blend the warped right view with the left image, weighted by the
    combined ambiguity mask. Returns (reconstruction, combined mask)."""
    _check_same_scale(img_left, img_right, disp_left, mask_left)
    m = combined_mask(mask_left, "left")
    warped = warp_right_to_left(img_right, disp_left)
    recon = m * warped + (1.0 - m) * img_left
    return recon, m


def reconstruct_right(
    img_left: Tensor,
    img_right: Tensor,
    disp_right: Tensor,
    mask_right: Tensor,
) -> tuple[Tensor, Tensor]:
    _check_same_scale(img_right, img_left, disp_right, mask_right)
    m = combined_mask(mask_right, "right")
    warped = warp_left_to_right(img_left, disp_right)
    recon = m * warped + (1.0 - m) * img_right
    return recon, m


def _check_same_scale(img_a: Tensor, img_b: Tensor, disp: Tensor, mask: Tensor) -> None:
    n, _, h, w = img_a.shape
    if img_b.shape != img_a.shape:
        raise ValueError(f"image shapes differ: {img_a.shape} vs {img_b.shape}")
    for name, t in (("disparity", disp), ("mask", mask)):
        if t.shape != (n, 1, h, w):
            raise ValueError(f"{name} shape {t.shape} != ({n}, 1, {h}, {w})")
