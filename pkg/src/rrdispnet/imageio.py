"""Reading training images (8-bit PNG / binary PPM) and writing PGM outputs.

Images flow through the engine as (3, h, w) float arrays in [0, 1]; 8-bit
value 255 maps to exactly 1.0. Disparity maps are written as 16-bit PGM with
a fixed 1/256-pixel quantization; masks as 8-bit PGM.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

DISPARITY_PGM_SCALE = 256.0


def read_image(path) -> np.ndarray:
    """Decode an 8-bit PNG or binary PPM into (3, h, w) float32 in [0, 1]."""
    path = str(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P6":
        raw = _read_pnm(path)
        if raw.ndim != 3:
            raise ValueError(f"{path}: PPM did not decode to 3 channels")
        arr = raw
    elif magic == b"\x89P":
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"))
    else:
        raise ValueError(f"{path}: unsupported image format (magic {magic!r})")
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def _read_pnm_header(fh):
    def token():
        tok = b""
        while True:
            ch = fh.read(1)
            if not ch:
                raise ValueError("truncated PNM header")
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = fh.read(1)
                continue
            if ch.isspace():
                if tok:
                    return tok
                continue
            tok += ch

    magic = token()
    width = int(token())
    height = int(token())
    maxval = int(token())
    return magic, width, height, maxval


def _read_pnm(path) -> np.ndarray:
    """Binary PPM (P6) or PGM (P5) to a uint8/uint16 array, (h, w[, 3])."""
    with open(path, "rb") as fh:
        magic, width, height, maxval = _read_pnm_header(fh)
        channels = {b"P6": 3, b"P5": 1}.get(magic)
        if channels is None:
            raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
        if maxval <= 0 or maxval > 65535:
            raise ValueError(f"{path}: bad maxval {maxval}")
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        count = width * height * channels
        data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
        if data.size != count:
            raise ValueError(f"{path}: truncated pixel data")
    arr = data.astype(np.uint16 if maxval > 255 else np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3)
    return arr.reshape(height, width)


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5) to (h, w) uint8 or uint16."""
    arr = _read_pnm(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected grayscale PGM")
    return arr


def write_pgm8(path, values01: np.ndarray) -> None:
    """Write a (h, w) array of [0, 1] values as 8-bit PGM (scaled by 255)."""
    arr = np.clip(np.asarray(values01, dtype=np.float64) * 255.0, 0, 255)
    arr = np.round(arr).astype(np.uint8)
    _write_pgm(path, arr, 255)


def write_pgm16(path, values: np.ndarray, scale: float = DISPARITY_PGM_SCALE) -> None:
    """Write a (h, w) array as 16-bit PGM, values multiplied by ``scale``."""
    arr = np.clip(np.asarray(values, dtype=np.float64) * scale, 0, 65535)
    arr = np.round(arr).astype(">u2")
    _write_pgm(path, arr, 65535)


def _write_pgm(path, arr: np.ndarray, maxval: int) -> None:
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_gt_disparity(path) -> np.ndarray:
    """Load a sparse ground-truth disparity map (pixels; 0 marks invalid).

    Accepts 16-bit PGM or PNG with the conventional 1/256-pixel encoding,
    or 8-bit maps holding whole pixels.
    """
    path = str(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P5":
        raw = read_pgm(path)
    elif magic == b"\x89P":
        with Image.open(path) as img:
            raw = np.asarray(img)
        if raw.ndim != 2:
            raise ValueError(f"{path}: ground truth must be single-channel")
    else:
        raise ValueError(f"{path}: unsupported ground-truth format")
    if raw.dtype == np.uint8:
        return raw.astype(np.float32)
    return raw.astype(np.float32) / DISPARITY_PGM_SCALE
