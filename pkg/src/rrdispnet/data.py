"""Stereo pair ingestion and training-time augmentation.

A manifest is a text file with one ``left_path right_path`` pair per line.
Augmentation applies the same geometric transform to both views; a
horizontal flip also swaps the two images, because mirroring a stereo pair
exchanges the viewpoint roles.
"""

from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .imageio import read_image


@dataclass
class AugmentRecord:
    crop_y: int = 0
    crop_x: int = 0
    flipped: bool = False
    gamma: float = 1.0
    brightness: float = 1.0
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class StereoSample:
    left: np.ndarray  # (3, h, w) float32 in [0, 1]
    right: np.ndarray
    left_path: str = ""
    right_path: str = ""
    aug: AugmentRecord | None = None


def load_pairs(manifest_path) -> list[StereoSample]:
    """Decode every pair listed in the manifest, preserving order.

    Raises ValueError naming the offending line on any missing file,
    unsupported format or within-pair size mismatch.
    """
    samples = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(
                    f"{manifest_path}:{lineno}: expected 'left_path right_path', got {line!r}"
                )
            left_path, right_path = parts
            try:
                left = read_image(left_path)
                right = read_image(right_path)
            except (OSError, ValueError) as exc:
                raise ValueError(f"{manifest_path}:{lineno}: {exc}") from exc
            if left.shape != right.shape:
                raise ValueError(
                    f"{manifest_path}:{lineno}: pair sizes differ, "
                    f"left {left.shape[1:]} vs right {right.shape[1:]}"
                )
            samples.append(
                StereoSample(left=left, right=right, left_path=left_path, right_path=right_path)
            )
    return samples


def augment(
    sample: StereoSample,
    rng: np.random.Generator,
    crop_hw: tuple[int, int],
) -> StereoSample:
    """Random crop, flip and photometric jitter, identical on both views."""
    ch, cw = crop_hw
    _, h, w = sample.left.shape
    if h < ch or w < cw:
        raise ValueError(f"image ({h}, {w}) smaller than crop ({ch}, {cw})")

    y = int(rng.integers(0, h - ch + 1))
    x = int(rng.integers(0, w - cw + 1))
    left = sample.left[:, y : y + ch, x : x + cw]
    right = sample.right[:, y : y + ch, x : x + cw]

    flipped = bool(rng.random() < 0.5)
    if flipped:
        left, right = right[:, :, ::-1], left[:, :, ::-1]

    record = AugmentRecord(crop_y=y, crop_x=x, flipped=flipped)
    if rng.random() < 0.5:
        gamma = float(rng.uniform(0.8, 1.2))
        brightness = float(rng.uniform(0.5, 2.0))
        color = rng.uniform(0.8, 1.2, size=3)
        record = replace(
            record, gamma=gamma, brightness=brightness, color=tuple(float(c) for c in color)
        )
        factors = (brightness * color).astype(np.float32)[:, None, None]
        left = np.clip(np.power(left, gamma) * factors, 0.0, 1.0)
        right = np.clip(np.power(right, gamma) * factors, 0.0, 1.0)

    return StereoSample(
        left=np.ascontiguousarray(left, dtype=np.float32),
        right=np.ascontiguousarray(right, dtype=np.float32),
        left_path=sample.left_path,
        right_path=sample.right_path,
        aug=record,
    )


def worker_thread_cap(requested: int = 2) -> int:
    """Worker-thread budget for data loading; RRDN_THREADS caps it."""
    raw = os.environ.get("RRDN_THREADS")
    if raw is None:
        return requested
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"RRDN_THREADS must be an integer, got {raw!r}")
    return max(0, min(requested, cap))


def prefetch_ordered(fn, items, n_workers: int, depth: int = 8):
    """Apply ``fn`` to ``items`` on worker threads feeding a bounded window,
    yielding results in the input order regardless of worker count.
    ``n_workers=0`` runs inline."""
    if n_workers <= 0:
        for item in items:
            yield fn(item)
        return

    window: deque = deque()
    limit = max(n_workers, depth)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        for item in items:
            window.append(pool.submit(fn, item))
            if len(window) >= limit:
                yield window.popleft().result()
        while window:
            yield window.popleft().result()
