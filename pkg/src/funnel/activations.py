"""ReLU, PReLU, Swish and the funnel activation with its ablation variants.

The funnel activation computes ``max(x, T(x))`` where the condition ``T`` is a
per-channel spatial window response: a depthwise correlation followed by a
normalization layer.  Variants swap the condition for parameter-free pooling,
replace ``max`` by ``relu(x + T(x))``, or split the square window into a
1x3 and a 3x1 branch.

Gradient convention at ties: wherever ``x == T(x)`` the full gradient goes to
the identity branch.  ReLU follows the same rule at zero (``x >= 0`` passes),
so the zero-window funnel and ReLU agree in both passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError, StateError
from .tensor import DTYPE

PAIR = "1x3+3x1"
PRELU_INIT = 0.25

FUSIONS = ("max", "sum")
COMBINES = ("sum", "max")
CONDITIONS = ("param", "maxpool", "avgpool")
ACTIVATION_KINDS = ("relu", "prelu", "swish", "frelu", "dwrelu")


@dataclass(frozen=True)
class FunnelConfig:
    """Everything that distinguishes one funnel variant from another.

    ``window`` is an odd int ``k`` for a square ``k x k`` window or the string
    ``"1x3+3x1"`` for the two-branch irregular window.  ``init_value``, when
    set, replaces the gaussian window init with a constant at the window
    centre (used to reproduce PReLU with a 1x1 window).
    """

    window: Union[int, str] = 3
    fusion: str = "max"
    pair_combine: str = "max"
    condition: str = "param"
    norm: str = "bn"
    init_std: float = 0.1
    share_norm: bool = False
    norm_affine: bool = True
    groups: int = 1
    init_value: Optional[float] = None

    def __post_init__(self):
        w = self.window
        if isinstance(w, str) and w.strip().lower() != PAIR:
            try:
                w = int(w.lower().split("x")[0])
            except ValueError:
                raise ConfigError(f"bad window {self.window!r}") from None
            object.__setattr__(self, "window", w)
        elif isinstance(w, str):
            object.__setattr__(self, "window", PAIR)
        if isinstance(self.window, int) and (self.window < 1 or self.window % 2 == 0):
            raise ConfigError(f"square window must be odd and >= 1, got {self.window}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.pair_combine not in COMBINES:
            raise ConfigError(f"pair_combine must be one of {COMBINES}, got {self.pair_combine!r}")
        if self.condition not in CONDITIONS:
            raise ConfigError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")
        if self.init_std < 0:
            raise ConfigError("init_std must be >= 0")
        object.__setattr__(self, "norm", ops.norm_kind(self.norm))

    @property
    def is_pair(self) -> bool:
        return self.window == PAIR

    @property
    def parametric(self) -> bool:
        return self.condition == "param"

    @property
    def effective_norm(self) -> str:
        return self.norm if self.parametric else "none"

    def branches(self) -> list[tuple[str, int, int]]:
        """``(suffix, kh, kw)`` for every window branch."""
        if self.is_pair:
            return [("_1x3", 1, 3), ("_3x1", 3, 1)]
        return [("", self.window, self.window)]

    def norm_prefixes(self) -> list[str]:
        if self.effective_norm == "none":
            return []
        if self.is_pair and not self.share_norm:
            return [f"norm{s}" for s, _, _ in self.branches()]
        return ["norm"]


# -- scalar activations --------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    # same selection rule as the funnel max, so the degenerate cases agree bitwise
    return np.where(x >= 0.0, x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x >= 0, grad_out, 0.0)


def _slope(x, p):
    p = np.asarray(p, dtype=DTYPE).reshape(-1)
    if x.ndim != 4 or p.shape[0] != x.shape[1]:
        raise ShapeError(f"PReLU slope has {p.shape[0]} channels, input shape {x.shape}")
    return p[None, :, None, None]


def prelu_forward(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``max(x, p_c * x)`` with one slope per channel.

    The linear branch is formed as ``0.0 + p_c * x`` (never ``-0.0``), matching
    a 1x1 window that accumulates from ``+0.0``.
    """
    t = 0.0 + x * _slope(x, p)
    return np.where(x >= t, x, t)


def prelu_backward(x: np.ndarray, p: np.ndarray, grad_out: np.ndarray):
    pc = _slope(x, p)
    keep = x >= 0.0 + x * pc
    g_id = np.where(keep, grad_out, 0.0)
    g_lin = np.where(keep, 0.0, grad_out)
    grad_x = g_id + g_lin * pc
    grad_p = np.einsum("nchw,nchw->c", x, g_lin)
    return grad_x, grad_p


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def swish_forward(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def swish_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return grad_out * s * (1.0 + x * (1.0 - s))


# -- funnel condition ------------------------------------------------------------

def init_funnel_params(cfg: FunnelConfig, channels: int, rng: np.random.Generator | None):
    """Fresh ``(params, buffers)`` dicts for a funnel layer over ``channels``."""
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    if not cfg.parametric:
        return params, buffers
    for suffix, kh, kw in cfg.branches():
        if cfg.init_value is not None:
            w = np.zeros((1, channels, kh, kw), dtype=DTYPE)
            w[0, :, kh // 2, kw // 2] = cfg.init_value
        else:
            if rng is None:
                raise ConfigError("an rng is required for gaussian window init")
            w = cfg.init_std * rng.standard_normal((1, channels, kh, kw), dtype=DTYPE)
        params["weight" + suffix] = w
    for prefix in cfg.norm_prefixes():
        if cfg.norm_affine:
            params[prefix + ".gamma"] = np.ones(channels, dtype=DTYPE)
            params[prefix + ".beta"] = np.zeros(channels, dtype=DTYPE)
        if cfg.norm == "bn":
            buffers[prefix + ".running_mean"] = np.zeros(channels, dtype=DTYPE)
            buffers[prefix + ".running_var"] = np.ones(channels, dtype=DTYPE)
    return params, buffers


def _norm_params(cfg, prefix, channels, params, buffers) -> ops.NormParams:
    return ops.NormParams(
        cfg.effective_norm, channels,
        gamma=params.get(prefix + ".gamma"), beta=params.get(prefix + ".beta"),
        running_mean=buffers.get(prefix + ".running_mean"),
        running_var=buffers.get(prefix + ".running_var"),
        groups=cfg.groups, affine=cfg.norm_affine,
    )


@dataclass
class _NormStep:
    prefix: str
    params: ops.NormParams
    x: np.ndarray
    cache: ops.NormCache


@dataclass
class ConditionCache:
    cfg: FunnelConfig
    x: np.ndarray
    mode: str
    dw: list = field(default_factory=list)          # (suffix, DepthwiseConvParams)
    norms: dict = field(default_factory=dict)       # prefix -> _NormStep
    pair_first: Optional[np.ndarray] = None         # max-combine selection mask
    new_buffers: dict = field(default_factory=dict)


def _check_params(cfg: FunnelConfig, channels: int, params: dict) -> None:
    expected = set()
    if cfg.parametric:
        expected |= {"weight" + s for s, _, _ in cfg.branches()}
        if cfg.norm_affine:
            for prefix in cfg.norm_prefixes():
                expected |= {prefix + ".gamma", prefix + ".beta"}
    if set(params) != expected:
        raise ConfigError(f"funnel params {sorted(params)} do not match config (expected {sorted(expected)})")
    for s, kh, kw in cfg.branches() if cfg.parametric else ():
        if params["weight" + s].shape != (1, channels, kh, kw):
            raise ConfigError(f"weight{s} has shape {params['weight' + s].shape}, "
                              f"expected {(1, channels, kh, kw)}")


def _apply_norm(cfg, prefix, t, params, buffers, mode, cache: ConditionCache):
    np_ = _norm_params(cfg, prefix, t.shape[1], params, buffers)
    out, nc = ops.norm_forward(t, np_, mode)
    cache.norms[prefix] = _NormStep(prefix, np_, t, nc)
    if nc.running_mean is not None:
        cache.new_buffers[prefix + ".running_mean"] = nc.running_mean
        cache.new_buffers[prefix + ".running_var"] = nc.running_var
    return out


def funnel_condition(x: np.ndarray, cfg: FunnelConfig, params: dict,
                     buffers: dict | None = None, mode: str = "train"):
    """Spatial condition ``T(x)``; returns ``(T, cache)``."""
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    buffers = buffers or {}
    c = x.shape[1]
    _check_params(cfg, c, params)
    cache = ConditionCache(cfg, x, mode)
    outs = []
    for suffix, kh, kw in cfg.branches():
        if cfg.condition == "maxpool":
            t = ops.window_maxpool(x, kh, kw)
        elif cfg.condition == "avgpool":
            t = ops.window_avgpool(x, kh, kw)
        else:
            dwp = ops.DepthwiseConvParams(params["weight" + suffix])
            cache.dw.append((suffix, dwp))
            t = ops.depthwise_conv_forward(x, dwp)
            if cfg.is_pair and not cfg.share_norm and cfg.effective_norm != "none":
                t = _apply_norm(cfg, "norm" + suffix, t, params, buffers, mode, cache)
        outs.append(t)
    if len(outs) == 1:
        t = outs[0]
    elif cfg.pair_combine == "sum":
        t = outs[0] + outs[1]
    else:
        cache.pair_first = outs[0] >= outs[1]
        t = np.where(cache.pair_first, outs[0], outs[1])
    if cfg.effective_norm != "none" and (not cfg.is_pair or cfg.share_norm):
        t = _apply_norm(cfg, "norm", t, params, buffers, mode, cache)
    return t, cache


def funnel_condition_backward(cache: ConditionCache, grad_t: np.ndarray):
    """Return ``(grad_x, grads)`` for the condition branch."""
    cfg, x = cache.cfg, cache.x
    grads: dict[str, np.ndarray] = {}

    def through_norm(prefix, g):
        step = cache.norms[prefix]
        gx, gg, gb = ops.norm_backward(step.x, step.params, g, step.cache)
        if gg is not None:
            grads[prefix + ".gamma"] = gg
            grads[prefix + ".beta"] = gb
        return gx

    shared = cfg.effective_norm != "none" and (not cfg.is_pair or cfg.share_norm)
    if shared:
        grad_t = through_norm("norm", grad_t)
    branches = cfg.branches()
    if len(branches) == 1:
        branch_grads = [grad_t]
    elif cfg.pair_combine == "sum":
        branch_grads = [grad_t, grad_t]
    else:
        branch_grads = [np.where(cache.pair_first, grad_t, 0.0),
                        np.where(cache.pair_first, 0.0, grad_t)]
    grad_x = None
    for i, (suffix, kh, kw) in enumerate(branches):
        g = branch_grads[i]
        if cfg.condition == "maxpool":
            gx = ops.window_maxpool_backward(x, kh, kw, g)
        elif cfg.condition == "avgpool":
            gx = ops.window_avgpool_backward(x, kh, kw, g)
        else:
            if not shared and cfg.effective_norm != "none":
                g = through_norm("norm" + suffix, g)
            gx, gw = ops.depthwise_conv_backward(x, cache.dw[i][1], g)
            grads["weight" + suffix] = gw
        grad_x = gx if grad_x is None else grad_x + gx
    return grad_x, grads


# -- funnel activation -------------------------------------------------------------

@dataclass
class FunnelCache:
    cond: ConditionCache
    select_x: Optional[np.ndarray] = None   # max fusion: identity branch chosen
    positive: Optional[np.ndarray] = None   # sum fusion / dw-then-relu: relu mask

    @property
    def new_buffers(self) -> dict:
        return self.cond.new_buffers


def frelu_forward(x: np.ndarray, cfg: FunnelConfig, params: dict,
                  buffers: dict | None = None, mode: str = "train"):
    """Funnel activation; returns ``(out, cache)``.

    Max fusion yields ``max(x, T(x))``; sum fusion yields ``relu(x + T(x))``.
    """
    t, cc = funnel_condition(x, cfg, params, buffers, mode)
    if cfg.fusion == "max":
        sel = x >= t
        return np.where(sel, x, t), FunnelCache(cc, select_x=sel)
    s = x + t
    pos = s >= 0
    return np.where(pos, s, 0.0), FunnelCache(cc, positive=pos)


def frelu_backward(cache: FunnelCache | None, grad_out: np.ndarray):
    """Return ``(grad_x, grads)`` given the cache from :func:`frelu_forward`."""
    if cache is None:
        raise StateError("frelu_backward called without a forward cache")
    x = cache.cond.x
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    if cache.select_x is not None:
        g_id = np.where(cache.select_x, grad_out, 0.0)
        g_t = np.where(cache.select_x, 0.0, grad_out)
    else:
        g_id = g_t = np.where(cache.positive, grad_out, 0.0)
    gx_t, grads = funnel_condition_backward(cache.cond, g_t)
    return g_id + gx_t, grads


def dw_then_relu_forward(x: np.ndarray, cfg: FunnelConfig, params: dict,
                         buffers: dict | None = None, mode: str = "train"):
    """``relu(norm(depthwise(x)))``: the spatial condition on its own."""
    if not cfg.parametric:
        raise ConfigError("dw-then-relu needs a parametric condition")
    t, cc = funnel_condition(x, cfg, params, buffers, mode)
    pos = t >= 0
    return np.where(pos, t, 0.0), FunnelCache(cc, positive=pos)


def dw_then_relu_backward(cache: FunnelCache | None, grad_out: np.ndarray):
    if cache is None:
        raise StateError("dw_then_relu_backward called without a forward cache")
    return funnel_condition_backward(cache.cond, np.where(cache.positive, grad_out, 0.0))


# -- layer object ----------------------------------------------------------------------

class ActivationLayer:
    """A parameterized activation with its gradient buffers and forward cache."""

    def __init__(self, kind: str, channels: int, cfg: FunnelConfig | None = None,
                 rng: np.random.Generator | None = None):
        if kind not in ACTIVATION_KINDS:
            raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATION_KINDS}")
        self.kind = kind
        self.channels = channels
        self.cfg = cfg if cfg is not None else FunnelConfig()
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        if kind == "prelu":
            self.params["slope"] = np.full(channels, PRELU_INIT, dtype=DTYPE)
        elif kind in ("frelu", "dwrelu"):
            self.params, self.buffers = init_funnel_params(self.cfg, channels, rng)
        self.grads: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        mode = "train" if training else "eval"
        if self.kind == "relu":
            self._cache = x
            return relu_forward(x)
        if self.kind == "swish":
            self._cache = x
            return swish_forward(x)
        if self.kind == "prelu":
            self._cache = x
            return prelu_forward(x, self.params["slope"])
        fwd = frelu_forward if self.kind == "frelu" else dw_then_relu_forward
        out, cache = fwd(x, self.cfg, self.params, self.buffers, mode)
        if training:
            self.buffers.update(cache.new_buffers)
        self._cache = cache
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called before forward")
        cache, self._cache = self._cache, None
        if self.kind == "relu":
            return relu_backward(cache, grad_out)
        if self.kind == "swish":
            return swish_backward(cache, grad_out)
        if self.kind == "prelu":
            gx, gp = prelu_backward(cache, self.params["slope"], grad_out)
            self.grads["slope"] = gp
            return gx
        bwd = frelu_backward if self.kind == "frelu" else dw_then_relu_backward
        gx, grads = bwd(cache, grad_out)
        self.grads.update(grads)
        return gx

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def __repr__(self):
        return f"ActivationLayer({self.kind!r}, channels={self.channels}, cfg={self.cfg})"
