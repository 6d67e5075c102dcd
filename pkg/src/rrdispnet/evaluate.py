"""KITTI-style disparity evaluation: error metrics, warp RMSE, two-pass flip
post-processing and disparity/depth conversion.

Metric functions work on plain numpy maps; nothing here needs gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .network import DispNet
from .tensor import Tensor
from .warp import warp_left_to_right

REPORT_HEADER = "model,abs_rel,sq_rel,rmse,log_rmse,a1,a2,a3,warp_rmse,params,time_s"

DISPARITY_FLOOR = 1e-3
DEPTH_MIN = 1e-3
DEPTH_MAX = 80.0


@dataclass
class EvalReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    log_rmse: float
    a1: float
    a2: float
    a3: float
    warp_rmse: float
    param_count: int
    inference_time: float

    def csv_row(self, model: str) -> str:
        vals = [
            self.abs_rel, self.sq_rel, self.rmse, self.log_rmse,
            self.a1, self.a2, self.a3, self.warp_rmse,
        ]
        cells = [model] + [f"{v:.6f}" for v in vals]
        cells.append(str(self.param_count))
        cells.append(f"{self.inference_time:.6f}")
        return ",".join(cells)


def kitti_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    valid: np.ndarray,
    floor: float = DISPARITY_FLOOR,
) -> tuple[float, float, float, float, float, float, float]:
    """The seven standard depth-estimation metrics over the valid pixels.

    Returns (abs_rel, sq_rel, rmse, log_rmse, a1, a2, a3). Predictions are
    floored at a small positive value; ground truth must be positive wherever
    the validity mask is set.
    """
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("kitti_metrics: validity mask selects no pixels")
    p = np.maximum(np.asarray(pred, dtype=np.float64)[valid], floor)
    g = np.asarray(gt, dtype=np.float64)[valid]
    if (g <= 0).any():
        raise ValueError("kitti_metrics: ground truth must be positive on valid pixels")

    thresh = np.maximum(p / g, g / p)
    a1 = float((thresh < 1.25).mean())
    a2 = float((thresh < 1.25 ** 2).mean())
    a3 = float((thresh < 1.25 ** 3).mean())
    abs_rel = float(np.mean(np.abs(p - g) / g))
    sq_rel = float(np.mean((p - g) ** 2 / g))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    log_rmse = float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)))
    return abs_rel, sq_rel, rmse, log_rmse, a1, a2, a3


def warp_rmse(img_left: np.ndarray, img_right: np.ndarray, disp_right: np.ndarray) -> float:
    """RMSE between the right view synthesized from the left image and the
    real right view, reported on the 0-255 intensity scale.

    Images are (c, h, w) in [0, 1]; disparity is (h, w) in pixels.
    """
    left = Tensor(np.asarray(img_left, dtype=np.float64)[None])
    disp = Tensor(np.asarray(disp_right, dtype=np.float64)[None, None])
    synth = warp_left_to_right(left, disp).data[0]
    diff = (synth - np.asarray(img_right, dtype=np.float64)) * 255.0
    return float(np.sqrt(np.mean(diff ** 2)))


def flip_horizontal(arr: np.ndarray) -> np.ndarray:
    """Mirror the last (width) axis."""
    return np.ascontiguousarray(arr[..., ::-1])


def blend_flipped(d_first: np.ndarray, d_second: np.ndarray) -> np.ndarray:
    """Combine a disparity map with its mirrored-second-pass counterpart.

    ``d_second`` must already be flipped back into the first map's frame.
    The second pass wins over the left 5% band, the first pass over the
    right 5% band, with linear ramps out to 10% and a plain average between.
    """
    if d_first.shape != d_second.shape:
        raise ValueError(f"blend shapes differ: {d_first.shape} vs {d_second.shape}")
    h, w = d_first.shape[-2:]
    x = np.linspace(0.0, 1.0, w)
    left_band = 1.0 - np.clip(20.0 * (x - 0.05), 0.0, 1.0)
    right_band = left_band[::-1]
    mean = 0.5 * (d_first + d_second)
    return right_band * d_first + left_band * d_second + (1.0 - left_band - right_band) * mean


def postprocess_flip(net: DispNet, image: np.ndarray) -> np.ndarray:
    """Two-pass flip post-processing of the left disparity map.

    Runs the network on the image and on its mirror, mirrors the second
    result back and blends. ``image`` is (3, h, w) in [0, 1]; returns the
    blended (h, w) disparity.
    """
    d1 = net.forward(Tensor(image[None]))[0].disp_left.data[0, 0]
    flipped = flip_horizontal(image)
    d2 = net.forward(Tensor(flipped[None]))[0].disp_left.data[0, 0]
    return blend_flipped(d1, flip_horizontal(d2))


def disparity_to_depth(
    disp: np.ndarray,
    focal: float,
    baseline: float,
    floor: float = DISPARITY_FLOOR,
    min_depth: float = DEPTH_MIN,
    max_depth: float = DEPTH_MAX,
) -> np.ndarray:
    """Standard stereo relation depth = focal * baseline / disparity, with the
    disparity floored and the depth clamped to [min_depth, max_depth]."""
    if focal <= 0 or baseline <= 0:
        raise ValueError(f"focal and baseline must be positive, got {focal}, {baseline}")
    d = np.maximum(np.asarray(disp, dtype=np.float64), floor)
    return np.clip(focal * baseline / d, min_depth, max_depth)


def resize_disparity_nearest(disp: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize to the ground-truth resolution, scaling the
    disparity values by the width ratio."""
    h, w = disp.shape
    oh, ow = out_hw
    rows = np.minimum((np.arange(oh) * h / oh).astype(int), h - 1)
    cols = np.minimum((np.arange(ow) * w / ow).astype(int), w - 1)
    return disp[rows[:, None], cols[None, :]] * (ow / w)


def evaluate_dataset(
    net: DispNet,
    pairs,
    gt_maps,
    pp: bool = False,
    depth_space: bool = False,
    focal: float = 721.0,
    baseline: float = 0.54,
) -> EvalReport:
    """Aggregate metrics over (sample, ground truth) pairs.

    ``pairs`` is a sequence of StereoSample-likes with ``left``/``right``
    (3, h, w) arrays; ``gt_maps`` holds full-resolution disparity maps with
    zeros where no ground truth exists. Metrics are computed in disparity
    space unless ``depth_space`` is set.
    """
    pairs = list(pairs)
    gt_maps = list(gt_maps)
    if len(pairs) != len(gt_maps):
        raise ValueError(f"{len(pairs)} samples but {len(gt_maps)} ground-truth maps")
    if not pairs:
        raise ValueError("nothing to evaluate")

    metric_rows = []
    warp_values = []
    seconds = []
    for sample, gt in zip(pairs, gt_maps):
        start = time.perf_counter()
        outputs = net.forward(Tensor(sample.left[None]))
        disp_l = outputs[0].disp_left.data[0, 0]
        if pp:
            d2 = net.forward(Tensor(flip_horizontal(sample.left)[None]))[0].disp_left.data[0, 0]
            disp_l = blend_flipped(disp_l, flip_horizontal(d2))
        seconds.append(time.perf_counter() - start)

        disp_r = outputs[0].disp_right.data[0, 0]
        warp_values.append(warp_rmse(sample.left, sample.right, disp_r))

        gt = np.asarray(gt, dtype=np.float64)
        pred = resize_disparity_nearest(disp_l, gt.shape)
        valid = gt > 0
        if depth_space:
            pred_m = disparity_to_depth(pred, focal, baseline)
            gt_m = disparity_to_depth(gt, focal, baseline)
            metric_rows.append(kitti_metrics(pred_m, gt_m, valid, floor=DEPTH_MIN))
        else:
            metric_rows.append(kitti_metrics(pred, gt, valid))

    means = np.mean(np.asarray(metric_rows, dtype=np.float64), axis=0)
    return EvalReport(
        abs_rel=float(means[0]),
        sq_rel=float(means[1]),
        rmse=float(means[2]),
        log_rmse=float(means[3]),
        a1=float(means[4]),
        a2=float(means[5]),
        a3=float(means[6]),
        warp_rmse=float(np.mean(warp_values)),
        param_count=net.params.total_count(),
        inference_time=float(np.mean(seconds)),
    )


def write_report_csv(path, rows: list[tuple[str, EvalReport]]) -> None:
    lines = [REPORT_HEADER]
    lines += [report.csv_row(model) for model, report in rows]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
