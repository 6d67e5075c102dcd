"""Training loop (Adam, halving schedule, per-epoch checkpoints) and
full-resolution inference with optional flip post-processing.

A fixed seed fixes the whole trajectory: parameter init, epoch shuffles and
per-sample augmentation draws are all derived from it, and augmentation
seeds depend only on (seed, epoch, sample index) so the worker count cannot
change the data stream.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import StereoSample, augment, load_pairs, prefetch_ordered, worker_thread_cap
from .evaluate import blend_flipped, flip_horizontal
from .imageio import write_pgm8, write_pgm16
from .losses import FeatureExtractor, LossWeights, build_pyramid, total_loss
from .network import DispNet, NetworkConfig, load_network, save_checkpoint
from .tensor import ParamStore, Tensor, backward

LOG_HEADER = "step,epoch,lr,total,rec,smooth,perceptual,ambiguity,lr_consistency"


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    lr_halve_epochs: tuple[int, ...] = (30, 40)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    crop_h: int = 256
    crop_w: int = 512
    seed: int = 0
    num_scales: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    perceptual_widths: tuple[int, int, int] = (64, 128, 256)
    perceptual_seed: int = 7
    data_workers: int = 2

    def __post_init__(self):
        div = self.network.divisibility
        if self.crop_h % div or self.crop_w % div:
            raise ValueError(
                f"crop dims ({self.crop_h}, {self.crop_w}) must be divisible by {div}"
            )
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Initial rate halved at each configured epoch milestone."""
    lr = config.lr
    for milestone in sorted(config.lr_halve_epochs):
        if epoch >= milestone:
            lr *= 0.5
    return lr


class Adam:
    """Bias-corrected Adam over a ParamStore.

    A step with any non-finite gradient is rejected without advancing the
    step counter.
    """

    def __init__(self, params: ParamStore, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> bool:
        grads = {}
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                return False
            grads[name] = g

        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return True


def adam_step(params: ParamStore, state: Adam, lr: float) -> bool:
    """Apply one optimizer step using the gradients stored on the params."""
    if state.params is not params:
        raise ValueError("optimizer state belongs to a different parameter store")
    return state.step(lr)


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss or gradient stops training; the last
    good checkpoint stays on disk."""


def _augment_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, index)))


def _batch_tensor(samples: list[StereoSample], side: str) -> Tensor:
    return Tensor(np.stack([getattr(s, side) for s in samples]).astype(np.float32))


def _fmt(x: float) -> str:
    return repr(float(x))


def train(config: TrainConfig, manifest_path, out_dir) -> str:
    """Run the full schedule; returns the path of the final checkpoint.

    Writes one checkpoint per epoch plus ``checkpoint_final.rrdn`` and a
    per-step CSV loss log to ``out_dir``.
    """
    os.makedirs(out_dir, exist_ok=True)
    samples = load_pairs(manifest_path)
    if not samples:
        raise ValueError(f"manifest {manifest_path} lists no training pairs")

    net = DispNet(config.network, seed=config.seed)
    extractor = None
    if config.weights.p > 0:
        extractor = FeatureExtractor(config.perceptual_widths, seed=config.perceptual_seed)
    optimizer = Adam(net.params, config.beta1, config.beta2, config.eps)
    workers = worker_thread_cap(config.data_workers)

    log_path = os.path.join(out_dir, "train_log.csv")
    crop = (config.crop_h, config.crop_w)
    step = 0
    last_checkpoint = None
    with open(log_path, "w", encoding="utf-8") as log:
        log.write(LOG_HEADER + "\n")
        for epoch in range(config.epochs):
            lr = learning_rate(config, epoch)
            order = np.random.default_rng(
                np.random.SeedSequence((config.seed, epoch))
            ).permutation(len(samples))

            def prepare(index: int, _epoch=epoch) -> StereoSample:
                return augment(
                    samples[index], _augment_rng(config.seed, _epoch, int(index)), crop
                )

            prepared = prefetch_ordered(prepare, [int(i) for i in order], workers)
            batch: list[StereoSample] = []
            remaining = len(samples)
            for sample in prepared:
                batch.append(sample)
                remaining -= 1
                if len(batch) < config.batch_size and remaining > 0:
                    continue

                left = _batch_tensor(batch, "left")
                right = _batch_tensor(batch, "right")
                outputs = net.forward(left)
                pyr_l = build_pyramid(left, config.num_scales)
                pyr_r = build_pyramid(right, config.num_scales)
                loss, comps = total_loss(
                    outputs, pyr_l, pyr_r, config.weights, extractor, config.num_scales
                )
                if not math.isfinite(loss.item()):
                    raise TrainingAborted(
                        f"non-finite loss at step {step}; last checkpoint: {last_checkpoint}"
                    )
                net.params.zero_grad()
                backward(loss)
                if not optimizer.step(lr):
                    raise TrainingAborted(
                        f"non-finite gradient at step {step}; last checkpoint: {last_checkpoint}"
                    )
                step += 1
                log.write(
                    ",".join(
                        [str(step), str(epoch), _fmt(lr), _fmt(loss.item())]
                        + [_fmt(comps[k]) for k in
                           ("rec", "smooth", "perceptual", "ambiguity", "lr_consistency")]
                    )
                    + "\n"
                )
                batch = []

            ckpt = os.path.join(out_dir, f"checkpoint_epoch_{epoch:03d}.rrdn")
            save_checkpoint(ckpt, config.network, net.params)
            last_checkpoint = ckpt

    final = os.path.join(out_dir, "checkpoint_final.rrdn")
    save_checkpoint(final, config.network, net.params)
    return final


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _pad_to_divisible(img: np.ndarray, div: int) -> tuple[np.ndarray, tuple[int, int]]:
    _, h, w = img.shape
    ph = (-h) % div
    pw = (-w) % div
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return img, (ph, pw)


def run_inference(net: DispNet, image: np.ndarray, pp: bool = False) -> dict[str, np.ndarray]:
    """Full-resolution maps for one (3, h, w) image in [0, 1].

    One forward pass produces all four maps; ``pp`` adds exactly one more
    pass on the mirrored image and blends the left disparity.
    """
    _, h, w = image.shape
    padded, (ph, pw) = _pad_to_divisible(image, net.config.divisibility)
    out = net.forward(Tensor(padded[None].astype(np.float32)))[0]
    maps = {
        "disp_left": out.disp_left.data[0, 0],
        "disp_right": out.disp_right.data[0, 0],
        "mask_left": out.mask_left.data[0, 0],
        "mask_right": out.mask_right.data[0, 0],
    }
    if pp:
        flipped = flip_horizontal(padded)
        second = net.forward(Tensor(flipped[None].astype(np.float32)))[0]
        d2 = flip_horizontal(second.disp_left.data[0, 0])
        maps["disp_left"] = blend_flipped(maps["disp_left"], d2)
    if ph or pw:
        maps = {k: v[:h, :w] for k, v in maps.items()}
    return maps


def infer(checkpoint_path, image: np.ndarray, out_dir, pp: bool = False,
          stem: str = "out") -> dict[str, str]:
    """Load a checkpoint, run inference and write the four maps.

    Disparities go to 16-bit PGM (values times 256), masks to 8-bit PGM; a
    sidecar text file records the resolution handling and pass count.
    """
    os.makedirs(out_dir, exist_ok=True)
    net = load_network(checkpoint_path)
    _, h, w = image.shape
    _, (ph, pw) = _pad_to_divisible(image, net.config.divisibility)
    maps = run_inference(net, image, pp=pp)

    paths = {}
    for key in ("disp_left", "disp_right"):
        paths[key] = os.path.join(out_dir, f"{stem}_{key}.pgm")
        write_pgm16(paths[key], maps[key])
    for key in ("mask_left", "mask_right"):
        paths[key] = os.path.join(out_dir, f"{stem}_{key}.pgm")
        write_pgm8(paths[key], maps[key])

    meta = os.path.join(out_dir, f"{stem}_meta.txt")
    with open(meta, "w", encoding="utf-8") as fh:
        fh.write(f"input_size={h}x{w}\n")
        fh.write(f"padded_by={ph}x{pw}\n")
        fh.write(f"post_processed={pp}\n")
        fh.write(f"forward_passes={2 if pp else 1}\n")
        fh.write("disparity_scale=256\n")
        fh.write("mask_scale=255\n")
    paths["meta"] = meta
    return paths
