"""Forward-only NCHW tensor kernels.

Tensors are plain ``numpy.ndarray`` values of dtype float32 with shape
(N, C, H, W), row-major. Every kernel here is a pure function, validates
its inputs, and checks that its output is finite, so a NaN/Inf can never
propagate silently through the network graph.

Weight initialisation is deterministic: ``make_rng(seed)`` returns a
``numpy.random.Generator`` over PCG64, and ``init_weights`` draws kernel
entries in C order from a single uniform stream. Identical seeds give
bit-identical weights on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

SUPPORTED_KERNELS = (1, 3)


class ShapeError(ValueError):
    """Tensor or weight shapes do not line up; message names the dimension."""


class UnsupportedKernelError(ValueError):
    """Kernel size outside the supported set."""


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) for weight streams."""
    return np.random.default_rng(seed)


def _check_nchw(x: np.ndarray, name: str) -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-d (N, C, H, W) array")


def _require_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    return x


@dataclass(frozen=True)
class ConvWeights:
    """Dense convolution weights: kernel (C_out, C_in, k, k) plus per-channel bias."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.kernel.ndim != 4:
            raise ShapeError("kernel must be 4-d (C_out, C_in, k, k)")
        co, ci, kh, kw = self.kernel.shape
        if kh != kw or kh not in SUPPORTED_KERNELS:
            raise UnsupportedKernelError(
                f"kernel size {kh}x{kw} unsupported; square k in {SUPPORTED_KERNELS} required")
        if co < 1 or ci < 1:
            raise ShapeError(f"kernel needs C_out, C_in >= 1, got {co}, {ci}")
        if self.bias.shape != (co,):
            raise ShapeError(f"bias shape {self.bias.shape} != (C_out,) = ({co},)")

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def k(self) -> int:
        return self.kernel.shape[2]


def init_weights(rng: np.random.Generator, shape: tuple[int, int, int, int]) -> ConvWeights:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], fan_in = C_in * k^2.

    Biases are zero and consume no draws, so the stream position after a
    layer depends only on its kernel element count.
    """
    co, ci, kh, kw = shape
    if kh != kw or kh not in SUPPORTED_KERNELS:
        raise UnsupportedKernelError(f"kernel size {kh}x{kw} unsupported")
    bound = 1.0 / float(np.sqrt(ci * kh * kw))
    kernel = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    bias = np.zeros(co, dtype=DTYPE)
    return ConvWeights(kernel=kernel, bias=bias)


def conv2d(x: np.ndarray, w: ConvWeights, stride: int = 1, padding: int | None = None) -> np.ndarray:
    """Direct 2-d cross-correlation with per-output-channel bias.

    ``padding`` defaults to (k-1)//2, which preserves H and W at stride 1.
    Output spatial size is floor((H + 2p - k) / stride) + 1.
    """
    _check_nchw(x, "conv2d input")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if x.shape[1] != w.c_in:
        raise ShapeError(
            f"channel mismatch: input C={x.shape[1]} but kernel expects C_in={w.c_in}")
    k = w.k
    if padding is None:
        padding = (k - 1) // 2
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if k == 1:
        sub = x[:, :, ::stride, ::stride]
        out = np.einsum("nchw,oc->nohw", sub, w.kernel[:, :, 0, 0], optimize=True)
    else:
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(win, w.kernel, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out, dtype=DTYPE)
    out += w.bias.reshape(1, -1, 1, 1)
    return _require_finite(out, "conv2d")


def conv2d_reference(x: np.ndarray, w: ConvWeights, stride: int = 1,
                     padding: int | None = None) -> np.ndarray:
    """Loop-form convolution; the correctness oracle for the vectorised path.

    Intended for small shapes only (it walks every output cell in Python).
    """
    _check_nchw(x, "conv2d_reference input")
    if x.shape[1] != w.c_in:
        raise ShapeError(
            f"channel mismatch: input C={x.shape[1]} but kernel expects C_in={w.c_in}")
    k = w.k
    if padding is None:
        padding = (k - 1) // 2
    n, _, h, wd = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, w.c_out, ho, wo), dtype=np.float64)
    for b in range(n):
        for co in range(w.c_out):
            for i in range(ho):
                for j in range(wo):
                    patch = x[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, co, i, j] = np.sum(patch * w.kernel[co]) + w.bias[co]
    return _require_finite(out.astype(DTYPE), "conv2d_reference")


_SIG_LO = np.float32(np.nextafter(np.float32(0.0), np.float32(1.0)))
_SIG_HI = np.float32(np.nextafter(np.float32(1.0), np.float32(0.0)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign to avoid overflow in exp; clamp away the float32
    # saturation points so the output stays strictly inside (0, 1).
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIG_LO, _SIG_HI)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise nonlinearity: 'silu', 'relu' or 'sigmoid'. Shape preserved."""
    x = np.asarray(x, dtype=DTYPE)
    if kind == "silu":
        out = x * sigmoid(x)
    elif kind == "relu":
        out = np.maximum(x, 0.0)
    elif kind == "sigmoid":
        out = sigmoid(x)
    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    return _require_finite(out.astype(DTYPE), f"activation[{kind}]")


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate along C; a's channels precede b's. N, H, W must agree."""
    _check_nchw(a, "concat_channels a")
    _check_nchw(b, "concat_channels b")
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat_channels {name} mismatch: {a.shape[axis]} vs {b.shape[axis]}")
    return np.concatenate([a, b], axis=1)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Spatial mean per channel; output shape (N, C, 1, 1)."""
    _check_nchw(x, "global_avg_pool input")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError("global_avg_pool needs H, W >= 1")
    out = x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)
    return _require_finite(out, "global_avg_pool")


def maxpool_same(x: np.ndarray, k: int) -> np.ndarray:
    """k x k max pooling at stride 1 with (k-1)/2 padding; shape preserved.

    Borders are padded with -inf so edge cells reduce over their true
    in-bounds neighbourhood.
    """
    _check_nchw(x, "maxpool_same input")
    if k % 2 == 0 or k < 1:
        raise UnsupportedKernelError(f"maxpool_same needs odd k, got {k}")
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = win.max(axis=(4, 5)).astype(DTYPE)
    return _require_finite(out, "maxpool_same")


def bilinear_sample(x: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Four-neighbour bilinear interpolation at continuous (row, col) positions.

    ``coords`` has shape (N, H_out, W_out, 2) in input pixel units and is
    clamped to [0, H-1] x [0, W-1] before weighting (clamp-to-edge border
    policy). The four neighbour weights are nonnegative and sum to one.
    """
    _check_nchw(x, "bilinear_sample input")
    n, _, h, w = x.shape
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 4 or coords.shape[0] != n or coords.shape[3] != 2:
        raise ShapeError("coords must have shape (N, H_out, W_out, 2)")
    r = np.clip(coords[..., 0], 0.0, h - 1.0)
    c = np.clip(coords[..., 1], 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0).astype(DTYPE)
    fc = (c - c0).astype(DTYPE)

    flat = x.reshape(n, x.shape[1], h * w)
    out = np.empty((n, x.shape[1]) + coords.shape[1:3], dtype=DTYPE)
    for b in range(n):
        g00 = flat[b][:, (r0[b] * w + c0[b])]
        g01 = flat[b][:, (r0[b] * w + c1[b])]
        g10 = flat[b][:, (r1[b] * w + c0[b])]
        g11 = flat[b][:, (r1[b] * w + c1[b])]
        wr, wc = fr[b], fc[b]
        out[b] = ((1 - wr) * (1 - wc) * g00 + (1 - wr) * wc * g01
                  + wr * (1 - wc) * g10 + wr * wc * g11)
    return _require_finite(out, "bilinear_sample")
