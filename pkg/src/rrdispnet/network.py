"""Encoder-decoder disparity network with residual blocks, full-resolution
skip features, rectangular fusion convolutions and domain-transform blocks.

Three variants are exposed:

* ``rdispnet_m``      - 3x3 fusion kernels, no domain transforms
* ``rrdispnet_m``     - 3x5 fusion kernels, no domain transforms
* ``rrdispnet_dtm``   - 3x5 fusion kernels plus domain-transform blocks on
  every skip connection

The encoder is one stride-1 full-resolution stage followed by five stride-2
stages, each strided convolution followed by a residual block; a further
residual block forms the bottleneck. Each decoder stage upsamples (nearest),
concatenates the (optionally domain-transformed) encoder skip plus the
previous stage's upsampled output maps, fuses with one convolution, refines
with a residual block, and at the four finest scales emits a 4-channel
sigmoid head: left/right disparity (scaled to 30% of that scale's width) and
left/right ambiguity masks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ParamStore,
    Tensor,
    concat_channels,
    conv2d,
    elu,
    nearest_upsample2x,
    scalar_mul,
    sigmoid,
    slice_channels,
)

VARIANTS = {
    "rdispnet_m": (False, False),
    "rrdispnet_m": (True, False),
    "rrdispnet_dtm": (True, True),
}

DEFAULT_ENCODER_CHANNELS = (60, 80, 120, 160, 240, 320)
DEFAULT_DECODER_CHANNELS = (60, 80, 120, 160, 240)

CHECKPOINT_MAGIC = b"RRDN1"


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture selector.

    ``encoder_channels`` holds the full-resolution stage width followed by
    the five strided stage widths; ``decoder_channels[s]`` is the decoder
    width at scale ``1/2**s``. The variant fixes the fusion-kernel and
    domain-transform toggles.
    """

    variant: str = "rrdispnet_dtm"
    encoder_channels: tuple[int, ...] = DEFAULT_ENCODER_CHANNELS
    decoder_channels: tuple[int, ...] = DEFAULT_DECODER_CHANNELS
    num_output_scales: int = 4
    disparity_fraction: float = 0.3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(
                f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}"
            )
        if len(self.encoder_channels) != len(self.decoder_channels) + 1:
            raise ValueError(
                "encoder_channels must have one more entry (the full-resolution "
                f"stage) than decoder_channels; got {len(self.encoder_channels)} "
                f"vs {len(self.decoder_channels)}"
            )
        if self.num_output_scales < 1 or self.num_output_scales > len(
            self.decoder_channels
        ):
            raise ValueError(f"num_output_scales out of range: {self.num_output_scales}")

    @property
    def use_rect_fusion(self) -> bool:
        return VARIANTS[self.variant][0]

    @property
    def use_domain_transform(self) -> bool:
        return VARIANTS[self.variant][1]

    @property
    def num_strided_stages(self) -> int:
        return len(self.encoder_channels) - 1

    @property
    def divisibility(self) -> int:
        return 2 ** self.num_strided_stages


@dataclass
class ScaleOutputs:
    """Network outputs at one scale: disparities in pixels at that scale's
    resolution, ambiguity masks in (0, 1)."""

    disp_left: Tensor
    disp_right: Tensor
    mask_left: Tensor
    mask_right: Tensor


class Conv:
    # fan-in scaled init; gain 1 keeps ELU activations from growing with
    # depth, and the output heads use a small gain so the sigmoids start
    # unsaturated
    def __init__(self, store, name, c_in, c_out, kernel, stride, rng, dtype, gain=1.0):
        kh, kw = kernel
        fan_in = c_in * kh * kw
        w = rng.normal(0.0, gain / np.sqrt(fan_in), size=(c_out, c_in, kh, kw))
        self.weight = store.add(f"{name}.weight", w.astype(dtype))
        self.bias = store.add(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = ((kh - 1) // 2, (kw - 1) // 2)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ResidualBlock:
    """conv -> ELU -> conv plus the skip path, then a final ELU.

    Channel-preserving; the kernel is 3x3 in the encoder/decoder refinement
    role and 3x5 in the domain-transform role.
    """

    def __init__(self, store, name, channels, rng, dtype, kernel=(3, 3)):
        self.conv1 = Conv(store, f"{name}.conv1", channels, channels, kernel, (1, 1), rng, dtype)
        self.conv2 = Conv(store, f"{name}.conv2", channels, channels, kernel, (1, 1), rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return elu(x + self.conv2(elu(self.conv1(x))))


def domain_transform_block(store, name, channels, rng, dtype) -> ResidualBlock:
    """Residual 3x5 block that converts encoder (single-view) skip features
    into the decoder's left-right feature domain before fusion."""
    return ResidualBlock(store, name, channels, rng, dtype, kernel=(3, 5))


class DispNet:
    """The full network; ``forward`` maps a left image to per-scale outputs."""

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params = ParamStore()
        self.forward_count = 0
        rng = np.random.default_rng(seed)
        enc = config.encoder_channels
        dec = config.decoder_channels
        fusion_kernel = (3, 5) if config.use_rect_fusion else (3, 3)
        st = self.params

        self.enc_in = Conv(st, "enc0", 3, enc[0], (3, 3), (1, 1), rng, dtype)
        self.enc_down = []
        self.enc_res = []
        for s in range(1, len(enc)):
            self.enc_down.append(
                Conv(st, f"enc{s}.down", enc[s - 1], enc[s], (3, 3), (2, 2), rng, dtype)
            )
            self.enc_res.append(ResidualBlock(st, f"enc{s}.res", enc[s], rng, dtype))
        self.bottleneck = ResidualBlock(st, "bottleneck", enc[-1], rng, dtype)

        n_dec = len(dec)
        self.dt_blocks = {}
        self.fusion = {}
        self.dec_res = {}
        self.heads = {}
        for s in range(n_dec - 1, -1, -1):  # coarse (h/16) to fine (h/1)
            below = enc[-1] if s == n_dec - 1 else dec[s + 1]
            skip_c = enc[s]
            cat_c = below + skip_c
            if s < config.num_output_scales - 1:
                cat_c += 4  # the previous (coarser) stage's upsampled output maps
            if config.use_domain_transform:
                self.dt_blocks[s] = domain_transform_block(
                    st, f"dec{s}.dt", skip_c, rng, dtype
                )
            self.fusion[s] = Conv(
                st, f"dec{s}.fuse", cat_c, dec[s], fusion_kernel, (1, 1), rng, dtype
            )
            self.dec_res[s] = ResidualBlock(st, f"dec{s}.res", dec[s], rng, dtype)
            if s < config.num_output_scales:
                self.heads[s] = Conv(
                    st, f"dec{s}.head", dec[s], 4, (1, 1), (1, 1), rng, dtype, gain=0.1
                )

    def forward(self, images: Tensor) -> list[ScaleOutputs]:
        """Run the network on a batch of left images (n, 3, h, w).

        Returns one ScaleOutputs per output scale, finest first.
        """
        cfg = self.config
        n, c, h, w = images.shape
        if c != 3:
            raise ValueError(f"expected 3 input channels, got {c}")
        div = cfg.divisibility
        if h % div or w % div:
            raise ValueError(
                f"input spatial dims ({h}, {w}) must be divisible by {div}"
            )
        self.forward_count += 1

        skips = []
        x = elu(self.enc_in(images))
        skips.append(x)
        for down, res in zip(self.enc_down, self.enc_res):
            x = res(elu(down(x)))
            skips.append(x)
        x = self.bottleneck(x)

        outputs: dict[int, ScaleOutputs] = {}
        prev_maps: Tensor | None = None
        n_dec = len(cfg.decoder_channels)
        for s in range(n_dec - 1, -1, -1):
            x = nearest_upsample2x(x)
            skip = skips[s]
            if cfg.use_domain_transform:
                skip = self.dt_blocks[s](skip)
            parts = [skip, x]
            if prev_maps is not None:
                parts.append(nearest_upsample2x(prev_maps))
            x = self.dec_res[s](elu(self.fusion[s](concat_channels(parts))))
            if s < cfg.num_output_scales:
                raw = sigmoid(self.heads[s](x))
                w_s = w // (2 ** s)
                disp_scale = cfg.disparity_fraction * w_s
                outputs[s] = ScaleOutputs(
                    disp_left=scalar_mul(slice_channels(raw, 0, 1), disp_scale),
                    disp_right=scalar_mul(slice_channels(raw, 1, 2), disp_scale),
                    mask_left=slice_channels(raw, 2, 3),
                    mask_right=slice_channels(raw, 3, 4),
                )
                prev_maps = raw

        return [outputs[s] for s in range(cfg.num_output_scales)]

    __call__ = forward


def build(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> DispNet:
    return DispNet(config, seed=seed, dtype=dtype)


def param_count(store: ParamStore) -> int:
    """Total number of trainable scalars."""
    return store.total_count()


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
# magic "RRDN1"
# u32 LE  config block length, then that many bytes of key=value lines
# per parameter, in store order:
#   u32 LE name length, name bytes (utf-8)
#   4 x u32 LE shape (trailing dims padded with 1)
#   raw float32 LE values, row-major


def _config_to_text(config: NetworkConfig) -> str:
    return (
        f"variant={config.variant}\n"
        f"encoder_channels={','.join(str(c) for c in config.encoder_channels)}\n"
        f"decoder_channels={','.join(str(c) for c in config.decoder_channels)}\n"
        f"num_output_scales={config.num_output_scales}\n"
        f"disparity_fraction={config.disparity_fraction!r}\n"
    )


def _config_from_text(text: str) -> NetworkConfig:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    try:
        return NetworkConfig(
            variant=kv["variant"],
            encoder_channels=tuple(int(v) for v in kv["encoder_channels"].split(",")),
            decoder_channels=tuple(int(v) for v in kv["decoder_channels"].split(",")),
            num_output_scales=int(kv["num_output_scales"]),
            disparity_fraction=float(kv["disparity_fraction"]),
        )
    except KeyError as exc:
        raise ValueError(f"checkpoint config is missing key {exc}") from exc


def _padded_shape(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise ValueError(f"cannot serialize shape {shape}")
    return tuple(list(shape) + [1] * (4 - len(shape)))  # type: ignore[return-value]


def save_checkpoint(path, config: NetworkConfig, store: ParamStore) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        cfg = _config_to_text(config).encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        for name, tensor in store.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<4I", *_padded_shape(tensor.shape)))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[NetworkConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r})")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        config = _config_from_text(fh.read(cfg_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            shape = struct.unpack("<4I", fh.read(16))
            count = int(np.prod(shape))
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise ValueError(f"checkpoint truncated in parameter {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return config, arrays


def restore_params(store: ParamStore, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an already-built store; names and shapes
    must match exactly."""
    missing = [n for n in store.names() if n not in arrays]
    extra = [n for n in arrays if n not in store]
    if missing or extra:
        raise ValueError(
            f"checkpoint/config mismatch: missing={missing[:3]} extra={extra[:3]}"
        )
    for name, tensor in store.items():
        arr = arrays[name]
        if _padded_shape(tensor.shape) != arr.shape:
            raise ValueError(
                f"checkpoint/config mismatch: {name} has shape {arr.shape}, "
                f"expected {_padded_shape(tensor.shape)}"
            )
        tensor.data = arr.reshape(tensor.shape).astype(tensor.dtype)


def load_network(path, dtype=np.float32) -> DispNet:
    config, arrays = load_checkpoint(path)
    net = DispNet(config, seed=0, dtype=dtype)
    restore_params(net.params, arrays)
    return net
