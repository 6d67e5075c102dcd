"""Dense 4-D tensors with reverse-mode automatic differentiation.

Everything the network and the losses need is built from the ops in this
module: convolution, horizontal bilinear sampling, elementwise math,
up/downsampling and reductions. Each op records a backward rule; calling
``backward(loss)`` replays the recorded rules in reverse order and
accumulates gradients on every reachable leaf with ``requires_grad=True``.

Training runs in float32. Gradient checking (``grad_check``) should be done
on float64 tensors; central finite differences are too noisy at float32.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-7

_seq = itertools.count()


class Tensor:
    """A numpy-backed value that can participate in a gradient graph.

    Network and image tensors are 4-D ``(batch, channels, height, width)``;
    reductions produce 0-d scalars. ``grad`` stays ``None`` until a backward
    pass reaches the tensor, and is never allocated when
    ``requires_grad=False``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    # -- elementwise methods -------------------------------------------------

    def abs(self):
        return abs_(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def elu(self):
        return elu(self)

    def relu(self):
        return relu(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    def mean(self):
        return reduce_mean(self)

    def sum(self):
        return reduce_sum(self)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd) -> Tensor:
    """Wrap an op result; the backward rule is kept only if some input needs it."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class GradientTape:
    """The ops reachable from a root tensor, in recording order.

    Replaying the tape backward visits each recorded op exactly once;
    recording order is a topological order because inputs always exist
    before the op that consumes them.
    """

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def trace(cls, root: Tensor) -> "GradientTape":
        seen: set[int] = set()
        ops: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._bwd is None:
                continue
            seen.add(id(t))
            ops.append(t)
            stack.extend(t._parents)
        ops.sort(key=lambda t: t._seq)
        return cls(ops)

    def replay_backward(self) -> None:
        for t in reversed(self.ops):
            if t.grad is not None:
                t._bwd(t.grad)


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar tensor, got shape {loss.shape}")
    tape = GradientTape.trace(loss)
    loss.grad = np.ones_like(loss.data)
    tape.replay_backward()


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bwd)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def bwd(g):
        _accum(a, g * c)

    return _make(out, (a,), bwd)


def abs_(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def bwd(g):
        _accum(a, g * np.sign(a.data))

    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    """Guarded log: the argument is floored at LOG_FLOOR before taking the log.

    Sigmoid outputs can underflow to zero in float32; the floor keeps the
    value finite and zeroes the gradient in the floored region.
    """
    out = np.log(np.maximum(a.data, LOG_FLOOR))

    def bwd(g):
        live = a.data > LOG_FLOOR
        _accum(a, np.where(live, g, 0.0) / np.where(live, a.data, 1.0))

    return _make(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def elu(a: Tensor) -> Tensor:
    """ELU with alpha 1: identity for x >= 0, exp(x) - 1 below."""
    neg = a.data < 0
    out = a.data.copy()
    out[neg] = np.expm1(a.data[neg])

    def bwd(g):
        d = np.ones_like(a.data)
        d[neg] = out[neg] + 1.0
        _accum(a, g * d)

    return _make(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _make(out, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        inside = (a.data >= lo) & (a.data <= hi)
        _accum(a, g * inside)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    if not ts:
        raise ValueError("concat_channels of an empty list")
    n, _, h, w = ts[0].shape
    for t in ts[1:]:
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ValueError(
                f"concat_channels: got {t.shape}, expected batch/spatial ({n}, *, {h}, {w})"
            )
    out = np.concatenate([t.data for t in ts], axis=1)
    splits = np.cumsum([t.shape[1] for t in ts])[:-1]

    def bwd(g):
        for t, gs in zip(ts, np.split(g, splits, axis=1)):
            _accum(t, gs)

    return _make(out, tuple(ts), bwd)


def crop(a: Tensor, i0: int, i1: int, j0: int, j1: int) -> Tensor:
    """Spatial slice [i0:i1, j0:j1]; backward zero-pads back to the input."""
    out = a.data[:, :, i0:i1, j0:j1]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, :, i0:i1, j0:j1] = g
        _accum(a, full)

    return _make(out.copy(), (a,), bwd)


def slice_channels(a: Tensor, c0: int, c1: int) -> Tensor:
    """Channel slice [c0:c1]; backward routes the gradient back to the slice."""
    out = a.data[:, c0:c1]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, c0:c1] = g
        _accum(a, full)

    return _make(out.copy(), (a,), bwd)


def mean_channels(a: Tensor) -> Tensor:
    """Mean over the channel axis, keeping a singleton channel."""
    c = a.shape[1]
    out = a.data.mean(axis=1, keepdims=True)

    def bwd(g):
        _accum(a, np.broadcast_to(g / c, a.data.shape))

    return _make(out, (a,), bwd)


def nearest_upsample2x(a: Tensor) -> Tensor:
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        n, c, h2, w2 = g.shape
        _accum(a, g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make(out, (a,), bwd)


def avg_pool2x(a: Tensor) -> Tensor:
    return downsample_area(a, 2)


def downsample_area(a: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping factor x factor blocks."""
    n, c, h, w = a.shape
    f = int(factor)
    if h % f or w % f:
        raise ValueError(f"downsample_area: dims ({h}, {w}) not divisible by {f}")
    out = a.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))

    def bwd(g):
        gb = np.broadcast_to(
            g[:, :, :, None, :, None] / (f * f), (n, c, h // f, f, w // f, f)
        )
        _accum(a, gb.reshape(n, c, h, w))

    return _make(out, (a,), bwd)


def avg_pool3x3_valid(a: Tensor) -> Tensor:
    """3x3 mean with stride 1 and no padding (output shrinks by 2 per axis)."""
    n, c, h, w = a.shape
    if h < 3 or w < 3:
        raise ValueError(f"avg_pool3x3_valid needs spatial dims >= 3, got ({h}, {w})")
    oh, ow = h - 2, w - 2
    out = np.zeros((n, c, oh, ow), dtype=a.dtype)
    for di in range(3):
        for dj in range(3):
            out += a.data[:, :, di : di + oh, dj : dj + ow]
    out /= 9.0

    def bwd(g):
        dx = np.zeros_like(a.data)
        gs = g / 9.0
        for di in range(3):
            for dj in range(3):
                dx[:, :, di : di + oh, dj : dj + ow] += gs
        _accum(a, dx)

    return _make(out, (a,), bwd)


def reduce_mean(a: Tensor) -> Tensor:
    out = a.data.mean()

    def bwd(g):
        _accum(a, np.full(a.data.shape, g / a.data.size, dtype=a.dtype))

    return _make(np.asarray(out), (a,), bwd)


def reduce_sum(a: Tensor) -> Tensor:
    out = a.data.sum()

    def bwd(g):
        _accum(a, np.full(a.data.shape, g, dtype=a.dtype))

    return _make(np.asarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding.

    Kernels may be asymmetric (e.g. 3 tall by 5 wide). Differentiable with
    respect to the input, the weight and the bias.
    """
    n, c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ValueError(
            f"conv2d: input has {c_in} channels but weight expects {c_in_w}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    sh, sw = int(stride[0]), int(stride[1])
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d: stride components must be >= 1, got {stride}")
    ph, pw = int(padding[0]), int(padding[1])
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d: kernel ({kh}, {kw}) too large for padded input "
            f"({h + 2 * ph}, {w + 2 * pw})"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = np.empty((n, c_in, kh, kw, oh, ow), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + sh * oh : sh, kj : kj + sw * ow : sw]
    cols2 = cols.reshape(n, c_in * kh * kw, oh * ow)
    w2 = weight.data.reshape(c_out, c_in * kh * kw)
    out = np.matmul(w2, cols2).reshape(n, c_out, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(n, c_out, oh * ow)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            dw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
            _accum(weight, dw.reshape(weight.data.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(n, c_in, kh, kw, oh, ow)
            dxp = np.zeros((n, c_in, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki : ki + sh * oh : sh, kj : kj + sw * ow : sw] += dcols[
                        :, :, ki, kj
                    ]
            _accum(x, dxp[:, :, ph : ph + h, pw : pw + w])

    return _make(out, parents, bwd)


# ---------------------------------------------------------------------------
# horizontal bilinear sampling
# ---------------------------------------------------------------------------


def bilinear_hsample(image: Tensor, x_offsets: Tensor) -> Tensor:
    """Sample each pixel at a horizontally shifted position.

    ``out(n, c, i, j)`` interpolates ``image(n, c, i, j - x_offsets(n, 0, i, j))``
    linearly between the two neighbouring columns; a positive offset samples
    to the left. Sample coordinates are clamped to ``[0, w-1]`` so no read
    ever leaves the image, and the coordinate gradient is zero in the
    clamped region.
    """
    n, c, h, w = image.shape
    if x_offsets.shape != (n, 1, h, w):
        raise ValueError(
            f"bilinear_hsample: offsets shape {x_offsets.shape} != ({n}, 1, {h}, {w})"
        )
    if not np.isfinite(x_offsets.data).all():
        raise ValueError("bilinear_hsample: offsets contain non-finite values")

    cols = np.arange(w, dtype=image.dtype)
    x = cols - x_offsets.data[:, 0]  # (n, h, w)
    xc = np.clip(x, 0.0, float(w - 1))
    x0 = np.floor(xc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    wx = (xc - x0).astype(image.dtype)[:, None]  # (n, 1, h, w)

    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    yi = np.arange(h)[None, None, :, None]
    i0 = x0[:, None]  # (n, 1, h, w), broadcasts over channels
    i1 = x1[:, None]
    v0 = image.data[ni, ci, yi, i0]
    v1 = image.data[ni, ci, yi, i1]
    out = v0 * (1.0 - wx) + v1 * wx

    inside = ((x >= 0.0) & (x <= w - 1))[:, None]

    def bwd(g):
        if image.requires_grad:
            dimg = np.zeros_like(image.data)
            shape = (n, c, h, w)
            np.add.at(
                dimg,
                (
                    np.broadcast_to(ni, shape),
                    np.broadcast_to(ci, shape),
                    np.broadcast_to(yi, shape),
                    np.broadcast_to(i0, shape),
                ),
                g * (1.0 - wx),
            )
            np.add.at(
                dimg,
                (
                    np.broadcast_to(ni, shape),
                    np.broadcast_to(ci, shape),
                    np.broadcast_to(yi, shape),
                    np.broadcast_to(i1, shape),
                ),
                g * wx,
            )
            _accum(image, dimg)
        if x_offsets.requires_grad:
            # d out / d offset = -(v1 - v0) inside the clamp, 0 outside
            doff = -(g * (v1 - v0) * inside).sum(axis=1, keepdims=True)
            _accum(x_offsets, doff)

    return _make(out, (image, x_offsets), bwd)


# ---------------------------------------------------------------------------
# parameters and gradient checking
# ---------------------------------------------------------------------------


class ParamStore:
    """Named map of trainable tensors with deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray | Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def tensors(self) -> Iterable[Tensor]:
        return self._params.values()

    def total_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None


@dataclass
class GradCheckReport:
    n_elements: int
    max_abs_err: float
    max_rel_err: float
    tol: float
    passed: bool

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"grad_check: {status} over {self.n_elements} elements, "
            f"max_abs={self.max_abs_err:.3e}, max_rel={self.max_rel_err:.3e} (tol {self.tol:g})"
        )


def grad_check(
    f: Callable[[Tensor], Tensor],
    at: Tensor | np.ndarray,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the analytic gradient of a scalar-valued f against central
    finite differences, elementwise.

    The relative error uses ``|a - n| / max(1, |a|, |n|)`` so tiny gradients
    are judged on absolute error. Run this at float64; see module docstring.
    """
    base = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = (
        x.grad.copy() if x.grad is not None else np.zeros_like(base)
    )

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)

    err = np.abs(analytic - numeric)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = err / denom
    return GradCheckReport(
        n_elements=int(base.size),
        max_abs_err=float(err.max(initial=0.0)),
        max_rel_err=float(rel.max(initial=0.0)),
        tol=tol,
        passed=bool((rel <= tol).all()),
    )
