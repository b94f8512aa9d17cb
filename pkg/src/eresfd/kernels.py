"""Convolution, pooling, upsampling, norm-folding and fusion kernels.

Two convolution paths exist on purpose: a straightforward direct
evaluation (`method="direct"`) that computes each output location from
its input patch, and an im2col + matrix-multiply path
(`method="im2col"`) used by default.  The test suite diffs them against
each other and against scalar-loop oracles.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .tensor import as_tensor

DEFAULT_CONV_METHOD = "im2col"


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution; drives execution and costing."""

    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]
    in_channels: int
    out_channels: int
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        if kh < 1 or kw < 1 or sh < 1 or sw < 1:
            raise ValueError(f"kernel and stride must be positive: {self}")
        if ph < 0 or pw < 0:
            raise ValueError(f"padding must be non-negative: {self}")
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ValueError(f"channel counts and groups must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """floor((x + 2p - k) / s) + 1 per spatial dim; must stay positive."""
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ValueError(
                f"non-positive output dims {oh}x{ow} for input {h}x{w} with {self}"
            )
        return oh, ow

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)


def same_padding(kernel: int) -> int:
    """Zero padding (k - 1) // 2, the "same"-style choice for odd kernels."""
    return (kernel - 1) // 2


@dataclass
class ConvWeights:
    kernel: np.ndarray  # (out_c, in_c / groups, kh, kw) float32
    bias: np.ndarray | None = None  # (out_c,) float32

    def __post_init__(self):
        self.kernel = np.ascontiguousarray(self.kernel, dtype=np.float32)
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)

    def check(self, spec: ConvSpec) -> None:
        if self.kernel.shape != spec.weight_shape():
            raise ValueError(
                f"weight shape {self.kernel.shape} does not match spec {spec.weight_shape()}"
            )
        if spec.has_bias and (self.bias is None or self.bias.shape != (spec.out_channels,)):
            raise ValueError(f"bias missing or wrong length for {spec}")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float32)
        self.beta = np.asarray(self.beta, dtype=np.float32)
        self.running_mean = np.asarray(self.running_mean, dtype=np.float32)
        self.running_var = np.asarray(self.running_var, dtype=np.float32)
        lengths = {v.shape for v in (self.gamma, self.beta, self.running_mean, self.running_var)}
        if len(lengths) != 1 or self.gamma.ndim != 1:
            raise ValueError("batchnorm parameter vectors must share one 1-D length")
        if (self.running_var < 0).any():
            raise ValueError("running_var must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def _pad_input(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    """(n, c, h, w) -> (n, c*kh*kw, oh*ow) patch matrix, x already padded."""
    n, c, _, _ = x.shape
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float32)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = x[:, :, u : u + sh * oh : sh, v : v + sw * ow : sw]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(
    x: np.ndarray,
    spec: ConvSpec,
    w: ConvWeights,
    method: str = DEFAULT_CONV_METHOD,
) -> np.ndarray:
    """2-D convolution with zero padding and optional grouping."""
    x = as_tensor(x)
    w.check(spec)
    n, c, h, wd = x.shape
    if c != spec.in_channels:
        raise ValueError(f"input has {c} channels, spec expects {spec.in_channels}")
    oh, ow = spec.out_hw(h, wd)
    if method == "im2col":
        out = _conv2d_im2col(x, spec, w.kernel, oh, ow)
    elif method == "direct":
        out = _conv2d_direct(x, spec, w.kernel, oh, ow)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if w.bias is not None:
        out += w.bias[None, :, None, None]
    return out


def _conv2d_im2col(x, spec: ConvSpec, kernel, oh, ow):
    n = x.shape[0]
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    g = spec.groups
    icg = spec.in_channels // g
    ocg = spec.out_channels // g
    xp = _pad_input(x, ph, pw)
    out = np.empty((n, spec.out_channels, oh, ow), dtype=np.float32)
    if g == 1:
        cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
        wm = kernel.reshape(spec.out_channels, icg * kh * kw)
        out[:] = np.matmul(wm[None], cols).reshape(n, spec.out_channels, oh, ow)
    else:
        for gi in range(g):
            cols = _im2col(xp[:, gi * icg : (gi + 1) * icg], kh, kw, sh, sw, oh, ow)
            wm = kernel[gi * ocg : (gi + 1) * ocg].reshape(ocg, icg * kh * kw)
            out[:, gi * ocg : (gi + 1) * ocg] = np.matmul(wm[None], cols).reshape(
                n, ocg, oh, ow
            )
    return out


def _conv2d_direct(x, spec: ConvSpec, kernel, oh, ow):
    # Reference path: evaluate the convolution sum patch by patch.
    n = x.shape[0]
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    g = spec.groups
    icg = spec.in_channels // g
    ocg = spec.out_channels // g
    xp = _pad_input(x, ph, pw)
    out = np.empty((n, spec.out_channels, oh, ow), dtype=np.float32)
    for gi in range(g):
        xg = xp[:, gi * icg : (gi + 1) * icg]
        wg = kernel[gi * ocg : (gi + 1) * ocg].reshape(ocg, icg * kh * kw)
        for i in range(oh):
            for j in range(ow):
                patch = xg[:, :, i * sh : i * sh + kh, j * sw : j * sw + kw]
                out[:, gi * ocg : (gi + 1) * ocg, i, j] = patch.reshape(n, -1) @ wg.T
    return out


def depthwise_conv2d(
    x: np.ndarray,
    spec: ConvSpec,
    w: ConvWeights,
    method: str = DEFAULT_CONV_METHOD,
) -> np.ndarray:
    """Per-channel spatial convolution; channel i of the output depends only
    on channel i of the input."""
    if not spec.is_depthwise:
        raise ValueError(f"spec is not depthwise: {spec}")
    x = as_tensor(x)
    w.check(spec)
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if method == "direct":
        return conv2d(x, spec, w, method="direct")
    n, c, h, wd = x.shape
    oh, ow = spec.out_hw(h, wd)
    kh, kw = spec.kernel
    sh, sw = spec.stride
    xp = _pad_input(x, *spec.padding)
    # Accumulate one shifted slice per kernel tap, vectorized over channels.
    out = np.zeros((n, c, oh, ow), dtype=np.float32)
    for u in range(kh):
        for v in range(kw):
            out += w.kernel[None, :, 0, u, v, None, None] * xp[
                :, :, u : u + sh * oh : sh, v : v + sw * ow : sw
            ]
    if w.bias is not None:
        out += w.bias[None, :, None, None]
    return out


def maxpool2d(
    x: np.ndarray,
    kernel: tuple[int, int],
    stride: tuple[int, int],
    padding: tuple[int, int] = (0, 0),
) -> np.ndarray:
    """Max pooling; padded cells act as -infinity."""
    x = as_tensor(x)
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    n, c, h, w = x.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"non-positive pool output dims {oh}x{ow} for input {h}x{w}")
    xp = _pad_input(x, ph, pw, value=-np.inf)
    out = np.full((n, c, oh, ow), -np.inf, dtype=np.float32)
    for u in range(kh):
        for v in range(kw):
            np.maximum(out, xp[:, :, u : u + sh * oh : sh, v : v + sw * ow : sw], out=out)
    return out


def upsample_nearest2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling: out[..., i, j] = x[..., i // 2, j // 2]."""
    x = as_tensor(x)
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def fold_batchnorm(spec: ConvSpec, w: ConvWeights, bn: BatchNormParams) -> ConvWeights:
    """Fold inference-time normalization into the convolution weights.

    conv(x, folded) == bn(conv(x, w)) for all x:
    scale = gamma / sqrt(var + eps) applied per output channel to the
    kernel, folded bias = beta + (bias - mean) * scale.
    """
    w.check(spec)
    if bn.gamma.shape[0] != spec.out_channels:
        raise ValueError(
            f"batchnorm length {bn.gamma.shape[0]} != out_channels {spec.out_channels}"
        )
    scale = bn.gamma.astype(np.float64) / np.sqrt(
        bn.running_var.astype(np.float64) + bn.epsilon
    )
    kernel = (w.kernel.astype(np.float64) * scale[:, None, None, None]).astype(np.float32)
    bias0 = np.zeros(spec.out_channels) if w.bias is None else w.bias.astype(np.float64)
    bias = (bn.beta.astype(np.float64) + (bias0 - bn.running_mean.astype(np.float64)) * scale)
    return ConvWeights(kernel=kernel, bias=bias.astype(np.float32))


def weighted_fusion(
    xs: Sequence[np.ndarray],
    weights: Sequence[float],
    epsilon: float = 1e-4,
) -> np.ndarray:
    """Fast normalized fusion: sum(w_i * x_i) / (sum(w_i) + epsilon).

    Weights are clamped at zero from below before use so the output stays
    inside the (scaled) convex hull of the inputs.
    """
    if not xs:
        raise ValueError("weighted_fusion needs at least one input")
    if len(weights) != len(xs):
        raise ValueError(f"{len(weights)} weights for {len(xs)} inputs")
    ts = [as_tensor(x) for x in xs]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ValueError(f"weighted_fusion shape mismatch: {ts[0].shape} vs {t.shape}")
    ws = np.maximum(np.asarray(weights, dtype=np.float32), 0.0)
    acc = np.zeros_like(ts[0])
    for wi, t in zip(ws, ts):
        acc += wi * t
    return acc / (ws.sum() + np.float32(epsilon))


@contextlib.contextmanager
def thread_limit(threads: int) -> Iterator[None]:
    """Cap BLAS/OpenMP thread pools; threads=1 is the deterministic mode."""
    if threads < 1:
        raise ValueError("thread count must be >= 1")
    with threadpool_limits(limits=threads):
        yield
