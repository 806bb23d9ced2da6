"""Building blocks of the detector graph.

Each block is a pure function over float32 NCHW arrays and an immutable
parameter struct. Activation placement is fixed and documented per block:
spatial 3x3 convolutions and block-level 1x1 convolutions use SiLU, while
the pointwise mixing convolution inside a partial convolution, the offset
generator of the dynamic upsampler and the final prediction convolution of
a head stay linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConvWeights,
    ShapeError,
    UnsupportedKernelError,
    activation,
    bilinear_sample,
    concat_channels,
    conv2d,
    global_avg_pool,
    maxpool_same,
    sigmoid,
)


@dataclass(frozen=True)
class SeParams:
    """Squeeze-excitation gate parameters: two projections with biases.

    w1 has shape (C/s, C) and w2 has shape (C, C/s) for squeeze ratio s.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self) -> None:
        squeeze, c = self.w1.shape
        if self.w2.shape != (c, squeeze):
            raise ShapeError(
                f"se projections disagree: w1 {self.w1.shape} vs w2 {self.w2.shape}")
        if self.b1.shape != (squeeze,) or self.b2.shape != (c,):
            raise ShapeError("se bias shapes must be (C/s,) and (C,)")

    @property
    def channels(self) -> int:
        return self.w1.shape[1]


@dataclass(frozen=True)
class PConvBottleneck:
    """Residual bottleneck: partial 3x3 conv then standard 1x1 mix."""

    w3: ConvWeights
    w1: ConvWeights


@dataclass(frozen=True)
class C2fParams:
    """Split-transform-concatenate block with partial-conv bottlenecks."""

    entry: ConvWeights
    bottlenecks: tuple[PConvBottleneck, ...]
    exit: ConvWeights
    ratio: int


@dataclass(frozen=True)
class FusionParams:
    """One top-down fusion step: gate, upsampler offsets and the 1x1 mix."""

    se: SeParams
    offset: ConvWeights
    mix: ConvWeights


@dataclass(frozen=True)
class HeadParams:
    """Per-level predictor: 3x3 conv C->C then linear 1x1 conv C->(4+K)."""

    conv: ConvWeights
    pred: ConvWeights


def _act(x: np.ndarray, kind: str | None) -> np.ndarray:
    return x if kind is None else activation(x, kind)


def pconv_forward(x: np.ndarray, w3: ConvWeights, w1: ConvWeights, ratio: int,
                  act: str | None = "silu") -> np.ndarray:
    """Partial convolution: 3x3 over the first C/ratio channels, rest bypassed.

    The active group is activated after its 3x3; the concatenated result is
    mixed by a linear 1x1 across all C channels. ``act=None`` gives the
    fully linear mode used by identity tests.
    """
    c = x.shape[1]
    if c % ratio:
        raise ShapeError(f"channels {c} not divisible by partial-conv ratio {ratio}")
    cp = c // ratio
    if w3.c_in != cp or w3.c_out != cp:
        raise ShapeError(f"spatial conv must map {cp}->{cp}, got {w3.c_in}->{w3.c_out}")
    if w3.k != 3:
        raise UnsupportedKernelError("partial spatial conv must be 3x3")
    if w1.c_in != c or w1.c_out != c or w1.k != 1:
        raise ShapeError(f"mix conv must be 1x1 {c}->{c}, got {w1.c_in}->{w1.c_out} k={w1.k}")
    active = _act(conv2d(x[:, :cp], w3), act)
    return conv2d(concat_channels(active, x[:, cp:]), w1)


def pc_c2f_forward(x: np.ndarray, p: C2fParams, act: str | None = "silu") -> np.ndarray:
    """C2f with partial-conv bottlenecks.

    Entry 1x1 conv, split into two halves, bottlenecks chained on the second
    half with additive residuals, all intermediate halves concatenated, exit
    1x1 conv restores the block width.
    """
    if len(p.bottlenecks) < 1:
        raise ValueError("pc_c2f_forward needs at least one bottleneck")
    t = _act(conv2d(x, p.entry), act)
    half = t.shape[1] // 2
    if t.shape[1] % 2:
        raise ShapeError(f"entry width {t.shape[1]} is not splittable into halves")
    chunks = [t[:, :half], t[:, half:]]
    cur = chunks[1]
    for bt in p.bottlenecks:
        cur = cur + pconv_forward(cur, bt.w3, bt.w1, p.ratio, act)
        chunks.append(cur)
    merged = np.concatenate(chunks, axis=1)
    return _act(conv2d(merged, p.exit), act)


def se_gate(f: np.ndarray, p: SeParams) -> np.ndarray:
    """Channel attention vector in (0, 1): sigmoid(W2 . relu(W1 . GAP(f) + b1) + b2).

    Returns shape (N, C).
    """
    if f.shape[1] != p.channels:
        raise ShapeError(f"se gate expects C={p.channels}, got {f.shape[1]}")
    g = global_avg_pool(f)[:, :, 0, 0]
    hidden = np.maximum(g @ p.w1.T + p.b1, 0.0)
    return sigmoid(hidden @ p.w2.T + p.b2)


def dysample_up2(x: np.ndarray, offset_gen: ConvWeights) -> np.ndarray:
    """Content-aware 2x upsampling by bilinear sampling at offset positions.

    A linear 1x1 conv produces 2*s^2 = 8 offset channels (row/col pairs for
    the four subpixel positions). Sample position = static half-pixel grid
    + 0.25 * raw offset, in input pixel units, clamped at the borders. Zero
    offsets reduce exactly to plain bilinear 2x upsampling.
    """
    n, c, h, w = x.shape
    if offset_gen.c_in != c or offset_gen.c_out != 8 or offset_gen.k != 1:
        raise ShapeError(
            f"offset generator must be 1x1 {c}->8, got "
            f"{offset_gen.c_in}->{offset_gen.c_out} k={offset_gen.k}")
    raw = conv2d(x, offset_gen)  # (N, 8, H, W), linear

    coords = np.empty((n, 2 * h, 2 * w, 2), dtype=np.float64)
    oi = np.arange(2 * h, dtype=np.float64)
    oj = np.arange(2 * w, dtype=np.float64)
    # Half-pixel grid: output cell centre mapped back to input coordinates.
    base_r = (oi + 0.5) / 2.0 - 0.5
    base_c = (oj + 0.5) / 2.0 - 0.5
    coords[..., 0] = base_r[None, :, None]
    coords[..., 1] = base_c[None, None, :]

    # Offset channel pair (2k, 2k+1) belongs to subpixel k = 2*di + dj.
    for di in range(2):
        for dj in range(2):
            k = 2 * di + dj
            coords[:, di::2, dj::2, 0] += 0.25 * raw[:, 2 * k]
            coords[:, di::2, dj::2, 1] += 0.25 * raw[:, 2 * k + 1]
    return bilinear_sample(x, coords)


def bilinear_up2(x: np.ndarray) -> np.ndarray:
    """Plain bilinear 2x upsampling on the static half-pixel grid."""
    n, _, h, w = x.shape
    coords = np.empty((n, 2 * h, 2 * w, 2), dtype=np.float64)
    coords[..., 0] = ((np.arange(2 * h) + 0.5) / 2.0 - 0.5)[None, :, None]
    coords[..., 1] = ((np.arange(2 * w) + 0.5) / 2.0 - 0.5)[None, None, :]
    return bilinear_sample(x, coords)


def ag_fusion(deep: np.ndarray, shallow: np.ndarray, p: FusionParams,
              act: str | None = "silu") -> np.ndarray:
    """Attention-gated fusion: mix(concat(up2(deep), gate(shallow) * shallow)).

    ``deep`` must sit one pyramid level below ``shallow`` (half resolution).
    """
    if deep.shape[2] * 2 != shallow.shape[2] or deep.shape[3] * 2 != shallow.shape[3]:
        raise ShapeError(
            f"fusion needs a 2:1 resolution ratio, got deep {deep.shape[2:]} "
            f"vs shallow {shallow.shape[2:]}")
    up = dysample_up2(deep, p.offset)
    alpha = se_gate(shallow, p.se)
    gated = shallow * alpha[:, :, None, None]
    return _act(conv2d(concat_channels(up, gated), p.mix), act)


def sppf(x: np.ndarray, cv1: ConvWeights, cv2: ConvWeights, k: int,
         act: str | None = "silu") -> np.ndarray:
    """Cascaded max-pool pyramid: 1x1 halving conv, three chained k-pools,
    concat of the four taps, 1x1 conv restoring the width."""
    if k % 2 == 0:
        raise UnsupportedKernelError(f"sppf needs odd k, got {k}")
    t = _act(conv2d(x, cv1), act)
    p1 = maxpool_same(t, k)
    p2 = maxpool_same(p1, k)
    p3 = maxpool_same(p2, k)
    return _act(conv2d(np.concatenate([t, p1, p2, p3], axis=1), cv2), act)


def head_forward(x: np.ndarray, p: HeadParams, act: str | None = "silu") -> np.ndarray:
    """Detection head: activated 3x3 conv then linear 1x1 producing raw logits."""
    return conv2d(_act(conv2d(x, p.conv), act), p.pred)
