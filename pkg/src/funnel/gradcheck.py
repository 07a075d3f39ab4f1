"""Central finite-difference oracle for every backward pass in the package.

The checker reduces a layer output to a scalar with a fixed random
projection ``L = sum(out * u)`` and compares ``dL/dinput`` and ``dL/dparam``
from the analytic backward against central differences.  Output elements that
sit within ``kink_eps`` of a non-differentiable point (a max tie or a ReLU
zero) are dropped from the projection so the comparison stays meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import activations as act
from . import ops
from .errors import ConfigError, NumericError
from .tensor import DTYPE, make_rng

REL_FLOOR = 1e-8
DEFAULT_H = 1e-5
DEFAULT_KINK_EPS = 1e-4
DEFAULT_TOL = 1e-5
PROJECTION_STREAM = 0x9E3779B9


def rel_error(a, n):
    """``|a - n| / max(|a|, |n|, 1e-8)`` elementwise."""
    a = np.asarray(a, dtype=DTYPE)
    n = np.asarray(n, dtype=DTYPE)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, one coordinate at a time."""
    if not h > 0:
        raise ConfigError(f"step h must be > 0, got {h}")
    x = np.array(x, dtype=DTYPE)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite objective while probing coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def _projected_gradient(fwd, x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    """Central differences of ``sum(fwd(x) * u)``.

    The two perturbed outputs are subtracted elementwise before projecting, so
    outputs the probe does not reach cancel exactly, and the projection is
    summed with ``math.fsum``.  Mathematically this is :func:`numeric_gradient`
    of the projected objective with far less rounding noise.
    """
    x = np.array(x, dtype=DTYPE)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    uf = u.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = np.array(fwd(x), dtype=DTYPE)
        flat[i] = orig - h
        fm = np.array(fwd(x), dtype=DTYPE)
        flat[i] = orig
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericError(f"non-finite output while probing coordinate {i}")
        gflat[i] = math.fsum(((fp - fm).reshape(-1) * uf).tolist()) / (2 * h)
    return grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: int
    worst_tensor: str
    skipped_count: int
    checked_count: int
    passed: bool
    tol: float

    def lines(self) -> list[str]:
        return [
            f"passed={'PASS' if self.passed else 'FAIL'}",
            f"max_rel_error={self.max_rel_error:.3e}",
            f"max_abs_error={self.max_abs_error:.3e}",
            f"worst_tensor={self.worst_tensor}",
            f"worst_index={self.worst_index}",
            f"skipped_count={self.skipped_count}",
            f"checked_count={self.checked_count}",
            f"tol={self.tol:g}",
        ]


Forward = Callable[[np.ndarray, dict], np.ndarray]
Backward = Callable[[np.ndarray, dict, np.ndarray], tuple]


def check(layer_fwd: Forward, layer_bwd: Backward, x: np.ndarray, params: Optional[dict] = None,
          tol: float = DEFAULT_TOL, kink_eps: float = DEFAULT_KINK_EPS, h: float = DEFAULT_H,
          kink_gap: Optional[Callable[[np.ndarray, dict], np.ndarray]] = None,
          seed: int = 0, scale: float = 1.0) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``layer_fwd(x, params)`` returns the output; ``layer_bwd(x, params, g)``
    returns ``(grad_x, {name: grad})``.  ``kink_gap(x, params)`` optionally
    returns, per output element, the distance to the nearest kink.
    """
    params = {k: np.array(v, dtype=DTYPE) for k, v in (params or {}).items()}
    x = np.array(x, dtype=DTYPE)
    out = layer_fwd(x, params)
    # a stream of its own, so the projection never coincides with an input
    # drawn from make_rng(seed)
    u = np.random.Generator(np.random.PCG64([int(seed), PROJECTION_STREAM])).standard_normal(out.shape)
    skipped = 0
    if kink_gap is not None:
        keep = np.asarray(kink_gap(x, params)) >= kink_eps
        skipped = int(keep.size - keep.sum())
        u = u * keep
    u = scale * u

    grad_x, grads = layer_bwd(x, params, u)
    pairs = [("x", grad_x, _projected_gradient(lambda v: layer_fwd(v, params), x, u, h))]
    for name in sorted(params):
        analytic = grads.get(name)
        if analytic is None:
            analytic = np.zeros_like(params[name])

        def fwd_p(v, name=name):
            return layer_fwd(x, {**params, name: v})
        pairs.append((name, np.asarray(analytic).reshape(params[name].shape),
                      _projected_gradient(fwd_p, params[name], u, h)))

    worst = (-1.0, 0.0, 0, "x")
    max_abs = 0.0
    checked = 0
    for name, a, n in pairs:
        r = rel_error(a, n).reshape(-1)
        checked += r.size
        max_abs = max(max_abs, float(np.max(np.abs(a - n))))
        i = int(np.argmax(r))
        if r[i] > worst[0]:
            worst = (float(r[i]), float(np.abs(a - n).reshape(-1)[i]), i, name)
    return GradCheckReport(worst[0], max_abs, worst[2], worst[3], skipped, checked,
                           bool(worst[0] <= tol), tol)


# -- named cases ---------------------------------------------------------------------
#
# Each case bundles a pure forward/backward pair, a random input, parameters and
# a kink-distance function so the CLI and the test-suite exercise the same code.

@dataclass
class Case:
    name: str
    fwd: Forward
    bwd: Backward
    x: np.ndarray
    params: dict
    kink_gap: Optional[Callable] = None

    def run(self, **kw) -> GradCheckReport:
        return check(self.fwd, self.bwd, self.x, self.params, kink_gap=self.kink_gap, **kw)


def _funnel_case(name, cfg, x, rng, dw_relu=False):
    params, buffers = act.init_funnel_params(cfg, x.shape[1], rng)
    # perturb affine params away from 1/0 so their gradients are non-trivial
    for k in params:
        if k.endswith(".gamma"):
            params[k] = params[k] + 0.3 * rng.standard_normal(params[k].shape)
        elif k.endswith(".beta"):
            params[k] = 0.3 * rng.standard_normal(params[k].shape)
        elif k.startswith("weight"):
            params[k] = 0.5 * rng.standard_normal(params[k].shape)
    fwd_fn = act.dw_then_relu_forward if dw_relu else act.frelu_forward
    bwd_fn = act.dw_then_relu_backward if dw_relu else act.frelu_backward

    def fwd(xv, p):
        return fwd_fn(xv, cfg, p, buffers, "train")[0]

    def bwd(xv, p, g):
        _, cache = fwd_fn(xv, cfg, p, buffers, "train")
        return bwd_fn(cache, g)

    def gap(xv, p):
        t, cc = act.funnel_condition(xv, cfg, p, buffers, "train")
        if dw_relu:
            g = np.abs(t)
        elif cfg.fusion == "max":
            g = np.abs(xv - t)
        else:
            g = np.abs(xv + t)
        if cfg.is_pair and cfg.pair_combine == "max" and cfg.parametric:
            # distance of the inner 1x3/3x1 max from its own tie
            outs = []
            for s, _, _ in cfg.branches():
                b = ops.depthwise_conv_forward(xv, ops.DepthwiseConvParams(p["weight" + s]))
                step = cc.norms.get("norm" + s)
                if step is not None:
                    b = ops.norm_forward(b, step.params, "train")[0]
                outs.append(b)
            g = np.minimum(g, np.abs(outs[0] - outs[1]))
        return g

    return Case(name, fwd, bwd, x, params, gap)


def _norm_case(name, kind, x, rng, groups=1):
    c = x.shape[1]
    base = ops.NormParams(kind, c, groups=groups)
    params = {"gamma": 1 + 0.3 * rng.standard_normal(c), "beta": 0.3 * rng.standard_normal(c)}

    def mk(p):
        return ops.NormParams(kind, c, gamma=p["gamma"], beta=p["beta"], groups=base.groups)

    def fwd(xv, p):
        return ops.norm_forward(xv, mk(p), "train")[0]

    def bwd(xv, p, g):
        np_ = mk(p)
        _, cache = ops.norm_forward(xv, np_, "train")
        gx, gg, gb = ops.norm_backward(xv, np_, g, cache)
        return gx, {"gamma": gg, "beta": gb}

    return Case(name, fwd, bwd, x, params)


CASE_NAMES = ("relu", "prelu", "swish", "dwconv", "conv", "bn", "ln", "in", "gn", "norm",
              "frelu", "frelu-sum", "dwrelu", "pair-sum", "pair-max", "maxpool", "avgpool")


def make_case(name: str, shape=(2, 2, 5, 5), window: int | str = 3, norm: str = "bn",
              seed: int = 0) -> Case:
    """Build a named gradient-check case on a random input of ``shape``."""
    rng = make_rng(seed)
    x = rng.standard_normal(shape)
    c = shape[1]
    if name == "relu":
        return Case(name, lambda xv, p: act.relu_forward(xv),
                    lambda xv, p, g: (act.relu_backward(xv, g), {}), x, {},
                    lambda xv, p: np.abs(xv))
    if name == "prelu":
        def bwd(xv, p, g):
            gx, gp = act.prelu_backward(xv, p["slope"], g)
            return gx, {"slope": gp}
        return Case(name, lambda xv, p: act.prelu_forward(xv, p["slope"]), bwd, x,
                    {"slope": rng.uniform(0.05, 0.6, c)}, lambda xv, p: np.abs(xv))
    if name == "swish":
        return Case(name, lambda xv, p: act.swish_forward(xv),
                    lambda xv, p, g: (act.swish_backward(xv, g), {}), x, {})
    if name == "dwconv":
        k = 3 if isinstance(window, str) else window

        def fwd(xv, p):
            return ops.depthwise_conv_forward(xv, ops.DepthwiseConvParams(p["weight"]))

        def bwd(xv, p, g):
            gx, gw = ops.depthwise_conv_backward(xv, ops.DepthwiseConvParams(p["weight"]), g)
            return gx, {"weight": gw}
        return Case(name, fwd, bwd, x, {"weight": rng.standard_normal((1, c, k, k))})
    if name == "conv":
        def mk(p):
            return ops.ConvParams(p["weight"], p["bias"], padding=(1, 1), stride=1)

        def fwd(xv, p):
            return ops.conv_forward(xv, mk(p))

        def bwd(xv, p, g):
            gx, gw, gb = ops.conv_backward(xv, mk(p), g)
            return gx, {"weight": gw, "bias": gb}
        return Case(name, fwd, bwd, x, {"weight": rng.standard_normal((3, c, 3, 3)),
                                        "bias": rng.standard_normal(3)})
    if name in ("bn", "ln", "in", "gn", "norm"):
        kind = norm if name == "norm" else name
        groups = 2 if kind == "gn" and c % 2 == 0 else 1
        return _norm_case(name, kind, x, rng, groups)
    if name in ("maxpool", "avgpool"):
        k = 3 if isinstance(window, str) else window

        def pool_gap(xv, p):
            cc = act.funnel_condition(xv, cfg, p)[0]
            return np.abs(xv - cc)
        cfg = act.FunnelConfig(window=k, condition=name)
        case = _funnel_case(name, cfg, x, rng)
        case.kink_gap = pool_gap
        return case
    funnel = {
        "frelu": dict(window=window, norm=norm),
        "frelu-sum": dict(window=window, norm=norm, fusion="sum"),
        "dwrelu": dict(window=window, norm=norm),
        "pair-sum": dict(window=act.PAIR, norm=norm, pair_combine="sum"),
        "pair-max": dict(window=act.PAIR, norm=norm, pair_combine="max"),
    }
    if name not in funnel:
        raise ConfigError(f"unknown gradcheck op {name!r}; expected one of {CASE_NAMES}")
    return _funnel_case(name, act.FunnelConfig(**funnel[name]), x, rng, dw_relu=name == "dwrelu")
