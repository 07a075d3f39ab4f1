"""Forward and backward kernels for convolution, normalization and pooling.

All kernels take and return float64 NCHW arrays.  "Convolution" means
cross-correlation (no kernel flip).  Padding is zero padding; stride is fixed
at 1 for the depthwise and pooling windows.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError
from .tensor import DTYPE

NORM_KINDS = ("bn", "ln", "in", "gn", "none")
_NORM_ALIASES = {
    "batchnorm": "bn", "layernorm": "ln", "instancenorm": "in",
    "groupnorm": "gn", "identity": "none", "-": "none", "": "none",
}


def _check_x(x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


# -- depthwise convolution ---------------------------------------------------

@dataclass
class DepthwiseConvParams:
    """One ``kh x kw`` window per channel; ``weights`` has shape (1, c, kh, kw)."""

    weights: np.ndarray
    padding: tuple[int, int] | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        if self.weights.ndim != 4 or self.weights.shape[0] != 1:
            raise ShapeError(f"depthwise weights must be (1, c, kh, kw), got {self.weights.shape}")
        if self.padding is None:
            kh, kw = self.weights.shape[2:]
            self.padding = ((kh - 1) // 2, (kw - 1) // 2)

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


def _dw_check(x, p: DepthwiseConvParams):
    _check_x(x)
    if x.shape[1] != p.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, window weights have {p.channels}")
    kh, kw = p.kernel
    ph, pw = p.padding
    ho, wo = x.shape[2] + 2 * ph - kh + 1, x.shape[3] + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"window {kh}x{kw} larger than padded input {x.shape[2:]}")
    return kh, kw, ph, pw, ho, wo


def depthwise_conv_forward(x: np.ndarray, p: DepthwiseConvParams) -> np.ndarray:
    kh, kw, ph, pw, ho, wo = _dw_check(x, p)
    xp = _pad(x, ph, pw)
    w = p.weights[0]
    # accumulate from +0.0 so an all-zero window yields +0.0, never -0.0
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=DTYPE)
    for di in range(kh):
        for dj in range(kw):
            out += xp[:, :, di:di + ho, dj:dj + wo] * w[:, di, dj][None, :, None, None]
    return out


def depthwise_conv_backward(x: np.ndarray, p: DepthwiseConvParams, grad_out: np.ndarray):
    """Return ``(grad_x, grad_weights)`` for the depthwise correlation."""
    kh, kw, ph, pw, ho, wo = _dw_check(x, p)
    if grad_out.shape != (x.shape[0], x.shape[1], ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output")
    xp = _pad(x, ph, pw)
    w = p.weights[0]
    grad_w = np.empty_like(p.weights)
    grad_xp = np.zeros(xp.shape, dtype=DTYPE)
    for di in range(kh):
        for dj in range(kw):
            grad_w[0, :, di, dj] = np.einsum("nchw,nchw->c", xp[:, :, di:di + ho, dj:dj + wo], grad_out)
            grad_xp[:, :, di:di + ho, dj:dj + wo] += grad_out * w[:, di, dj][None, :, None, None]
    grad_x = grad_xp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
    return np.ascontiguousarray(grad_x), grad_w


# -- dense convolution -------------------------------------------------------

@dataclass
class ConvParams:
    weights: np.ndarray          # (c_out, c_in, kh, kw)
    bias: Optional[np.ndarray] = None
    padding: tuple[int, int] = (0, 0)
    stride: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be (c_out, c_in, kh, kw), got {self.weights.shape}")
        if isinstance(self.padding, int):
            self.padding = (self.padding, self.padding)
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")


def _im2col(x, p: ConvParams):
    """Columns laid out as (c_in * kh * kw, n * ho * wo)."""
    _check_x(x)
    co, ci, kh, kw = p.weights.shape
    if x.shape[1] != ci:
        raise ShapeError(f"input has {x.shape[1]} channels, conv expects {ci}")
    ph, pw = p.padding
    s = p.stride
    xp = _pad(x, ph, pw)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    n = x.shape[0]
    ho, wo = (xp.shape[2] - kh) // s + 1, (xp.shape[3] - kw) // s + 1
    cols = np.empty((ci, kh, kw, n, ho, wo), dtype=DTYPE)
    for di in range(kh):
        for dj in range(kw):
            cols[:, di, dj] = xp[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s].transpose(1, 0, 2, 3)
    return cols.reshape(ci * kh * kw, n * ho * wo), (n, ho, wo)


def conv_forward(x: np.ndarray, p: ConvParams, return_cols: bool = False):
    cols, (n, ho, wo) = _im2col(x, p)
    co = p.weights.shape[0]
    out = p.weights.reshape(co, -1) @ cols
    if p.bias is not None:
        out += p.bias[:, None]
    out = np.ascontiguousarray(out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))
    return (out, cols) if return_cols else out


def conv_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray, cols=None):
    """Return ``(grad_x, grad_weights, grad_bias)``; ``grad_bias`` is None without bias."""
    if cols is None:
        cols, _ = _im2col(x, p)
    co, ci, kh, kw = p.weights.shape
    n = x.shape[0]
    ph, pw = p.padding
    s = p.stride
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    if grad_out.shape[:2] != (n, co) or cols.shape[1] != n * ho * wo:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output")
    g2 = grad_out.transpose(1, 0, 2, 3).reshape(co, n * ho * wo)
    grad_w = (g2 @ cols.T).reshape(p.weights.shape)
    grad_b = g2.sum(axis=1) if p.bias is not None else None
    if s == 1 and ph < kh and pw < kw:
        # stride 1: the input gradient is a full correlation with the flipped kernel
        flipped = ConvParams(np.ascontiguousarray(p.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)),
                             padding=(kh - 1 - ph, kw - 1 - pw))
        return conv_forward(grad_out, flipped), grad_w, grad_b
    gcols = (p.weights.reshape(co, -1).T @ g2).reshape(ci, kh, kw, n, ho, wo)
    hp, wp = x.shape[2] + 2 * ph, x.shape[3] + 2 * pw
    grad_xp = np.zeros((n, ci, hp, wp), dtype=DTYPE)
    for di in range(kh):
        for dj in range(kw):
            grad_xp[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s] += \
                gcols[:, di, dj].transpose(1, 0, 2, 3)
    grad_x = np.ascontiguousarray(grad_xp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]])
    return grad_x, grad_w, grad_b


# -- normalization -------------------------------------------------------------

def norm_kind(kind: str | None) -> str:
    k = "none" if kind is None else str(kind).strip().lower()
    k = _NORM_ALIASES.get(k, k)
    if k not in NORM_KINDS:
        raise ConfigError(f"unknown normalization kind {kind!r}; expected one of {NORM_KINDS}")
    return k


@dataclass
class NormParams:
    kind: str
    channels: int
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    eps: float = 1e-5
    momentum: float = 0.1
    groups: int = 1
    affine: bool = True

    def __post_init__(self):
        self.kind = norm_kind(self.kind)
        c = self.channels
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")
        if not 0 < self.momentum < 1:
            raise ConfigError("momentum must lie in (0, 1)")
        if self.kind == "gn" and (self.groups < 1 or c % self.groups):
            raise ConfigError(f"GroupNorm: {c} channels not divisible into {self.groups} groups")
        if self.kind != "none" and self.affine:
            self.gamma = np.ones(c, DTYPE) if self.gamma is None else np.asarray(self.gamma, DTYPE)
            self.beta = np.zeros(c, DTYPE) if self.beta is None else np.asarray(self.beta, DTYPE)
        if self.kind == "bn":
            if self.running_mean is None:
                self.running_mean = np.zeros(c, DTYPE)
            if self.running_var is None:
                self.running_var = np.ones(c, DTYPE)
            if np.any(self.running_var < 0):
                raise ConfigError("running_var must be non-negative")

    @property
    def has_affine(self) -> bool:
        return self.gamma is not None


@dataclass
class NormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mode: str
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None


def _grouped(x: np.ndarray, p: NormParams):
    """Reshape ``x`` so the statistics axes are explicit; returns (view, axes)."""
    n, c, h, w = x.shape
    if p.kind == "bn":
        return x, (0, 2, 3)
    if p.kind == "ln":
        return x, (1, 2, 3)
    if p.kind == "in":
        return x, (2, 3)
    return x.reshape(n, p.groups, c // p.groups, h, w), (2, 3, 4)


def _affine(xhat, p: NormParams):
    if not p.has_affine:
        return xhat
    return xhat * p.gamma[None, :, None, None] + p.beta[None, :, None, None]


def norm_forward(x: np.ndarray, p: NormParams, mode: str = "train"):
    """Normalize ``x``; returns ``(out, cache)``.

    In train mode BatchNorm reports updated running statistics on the cache
    (``cache.running_mean``/``running_var``) instead of mutating ``p``.
    """
    _check_x(x)
    if x.shape[1] != p.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, norm expects {p.channels}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if p.kind == "none":
        return x, NormCache(x, np.ones(1), mode)
    if p.kind == "bn" and mode == "eval":
        inv = 1.0 / np.sqrt(p.running_var + p.eps)
        xhat = (x - p.running_mean[None, :, None, None]) * inv[None, :, None, None]
        return _affine(xhat, p), NormCache(xhat, inv[None, :, None, None], mode)
    xr, axes = _grouped(x, p)
    mu = xr.mean(axis=axes, keepdims=True)
    xc = xr - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = (xc * inv).reshape(x.shape)
    cache = NormCache(xhat, inv, mode)
    if p.kind == "bn":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var.reshape(-1) * (m / (m - 1) if m > 1 else 1.0)
        cache.running_mean = (1 - p.momentum) * p.running_mean + p.momentum * mu.reshape(-1)
        cache.running_var = (1 - p.momentum) * p.running_var + p.momentum * unbiased
    return _affine(xhat, p), cache


def norm_backward(x: np.ndarray, p: NormParams, grad_out: np.ndarray, cache: NormCache | None = None,
                  mode: str = "train"):
    """Return ``(grad_x, grad_gamma, grad_beta)``; affine grads are None when absent."""
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    if p.kind == "none":
        return grad_out, None, None
    if cache is None:
        _, cache = norm_forward(x, p, mode)
    xhat = cache.xhat
    if p.has_affine:
        grad_gamma = np.sum(grad_out * xhat, axis=(0, 2, 3))
        grad_beta = np.sum(grad_out, axis=(0, 2, 3))
        dxhat = grad_out * p.gamma[None, :, None, None]
    else:
        grad_gamma = grad_beta = None
        dxhat = grad_out
    if p.kind == "bn" and cache.mode == "eval":
        return dxhat * cache.inv_std, grad_gamma, grad_beta
    dr, axes = _grouped(dxhat, p)
    xr, _ = _grouped(xhat, p)
    grad = cache.inv_std * (dr - dr.mean(axis=axes, keepdims=True)
                            - xr * np.mean(dr * xr, axis=axes, keepdims=True))
    return grad.reshape(x.shape), grad_gamma, grad_beta


def updated_running_stats(p: NormParams, cache: NormCache) -> NormParams:
    """Copy of ``p`` carrying the running statistics recorded in ``cache``."""
    if cache.running_mean is None:
        return p
    return replace(p, running_mean=cache.running_mean, running_var=cache.running_var)


# -- parameter-free windows ----------------------------------------------------

def _check_window(kh: int, kw: int) -> None:
    if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"pooling window must have odd sides, got {kh}x{kw}")


def _taps(x, kh, kw, fill):
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=fill)
    h, w = x.shape[2:]
    for di in range(kh):
        for dj in range(kw):
            yield di, dj, xp[:, :, di:di + h, dj:dj + w]


def window_maxpool(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Stride-1 max over each in-bounds ``kh x kw`` neighbourhood."""
    _check_x(x)
    _check_window(kh, kw)
    out = None
    for _, _, tap in _taps(x, kh, kw, -np.inf):
        out = tap.copy() if out is None else np.maximum(out, tap)
    return out


def window_maxpool_backward(x: np.ndarray, kh: int, kw: int, grad_out: np.ndarray) -> np.ndarray:
    """Route each output gradient to the first maximal tap in row-major order."""
    out = window_maxpool(x, kh, kw)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    h, w = x.shape[2:]
    grad_xp = np.zeros((x.shape[0], x.shape[1], h + 2 * ph, w + 2 * pw), dtype=DTYPE)
    taken = np.zeros(x.shape, dtype=bool)
    for di, dj, tap in _taps(x, kh, kw, -np.inf):
        hit = (tap == out) & ~taken
        taken |= hit
        grad_xp[:, :, di:di + h, dj:dj + w] += np.where(hit, grad_out, 0.0)
    return np.ascontiguousarray(grad_xp[:, :, ph:ph + h, pw:pw + w])


def _valid_counts(h, w, kh, kw):
    ones = np.ones((1, 1, h, w), dtype=DTYPE)
    cnt = None
    for _, _, tap in _taps(ones, kh, kw, 0.0):
        cnt = tap.copy() if cnt is None else cnt + tap
    return cnt


def window_avgpool(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Stride-1 mean over each window, dividing by the number of in-bounds taps."""
    _check_x(x)
    _check_window(kh, kw)
    acc = None
    for _, _, tap in _taps(x, kh, kw, 0.0):
        acc = tap.copy() if acc is None else acc + tap
    return acc / _valid_counts(x.shape[2], x.shape[3], kh, kw)


def window_avgpool_backward(x: np.ndarray, kh: int, kw: int, grad_out: np.ndarray) -> np.ndarray:
    _check_window(kh, kw)
    h, w = x.shape[2:]
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    g = grad_out / _valid_counts(h, w, kh, kw)
    grad_xp = np.zeros((x.shape[0], x.shape[1], h + 2 * ph, w + 2 * pw), dtype=DTYPE)
    for di in range(kh):
        for dj in range(kw):
            grad_xp[:, :, di:di + h, dj:dj + w] += g
    return np.ascontiguousarray(grad_xp[:, :, ph:ph + h, pw:pw + w])


# -- heads -----------------------------------------------------------------------

def pool2d_forward(x: np.ndarray, kind: str, k: int, stride: int, pad: int):
    """Strided max/avg pooling used by backbone stems (padding ignored by max)."""
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5)) if kind == "max" else win.mean(axis=(4, 5))


def global_avgpool_forward(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True)


def global_avgpool_backward(x_shape, grad_out: np.ndarray) -> np.ndarray:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(grad_out / (h * w), x_shape).copy()


def linear_forward(x2: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    out = x2 @ weight.T
    return out + bias if bias is not None else out


def linear_backward(x2, weight, grad_out):
    """Return ``(grad_x, grad_weight, grad_bias)`` for ``y = x W^T + b``."""
    return grad_out @ weight, grad_out.T @ x2, grad_out.sum(axis=0)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
