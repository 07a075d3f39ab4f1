"""Runnable networks instantiated from a :class:`~funnel.complexity.ModelSpec`."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .activations import ActivationLayer
from .complexity import LayerSpec, ModelSpec, output_shape
from .errors import ConfigError, StateError
from .tensor import DTYPE


class Layer:
    """Base layer: ``params``/``grads``/``buffers`` dicts keyed by local name."""

    is_activation = False

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, training=True):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def children(self):
        return ()


class Conv(Layer):
    def __init__(self, name, spec: LayerSpec, rng):
        super().__init__(name)
        cin, cout = int(spec.get("cin")), int(spec.get("cout"))
        kh = int(spec.get("kh", spec.get("k", 1)))
        kw = int(spec.get("kw", spec.get("k", 1)))
        self.stride, self.pad = int(spec.get("stride", 1)), int(spec.get("pad", 0))
        std = math.sqrt(2.0 / (cin * kh * kw))
        self.params["weight"] = std * rng.standard_normal((cout, cin, kh, kw), dtype=DTYPE)
        if spec.get("bias", 0):
            self.params["bias"] = np.zeros(cout, dtype=DTYPE)
        self._cache = None

    def _p(self):
        return ops.ConvParams(self.params["weight"], self.params.get("bias"),
                              (self.pad, self.pad), self.stride)

    def forward(self, x, training=True):
        out, cols = ops.conv_forward(x, self._p(), return_cols=True)
        self._cache = (x, cols) if training else None
        return out

    def backward(self, g):
        if self._cache is None:
            raise StateError(f"{self.name}: backward without a training forward")
        x, cols = self._cache
        self._cache = None
        gx, gw, gb = ops.conv_backward(x, self._p(), g, cols)
        self.grads["weight"] = gw
        if gb is not None:
            self.grads["bias"] = gb
        return gx


class DWConv(Layer):
    def __init__(self, name, spec: LayerSpec, c, rng):
        super().__init__(name)
        kh = int(spec.get("kh", spec.get("k", 3)))
        kw = int(spec.get("kw", spec.get("k", 3)))
        self.params["weight"] = 0.1 * rng.standard_normal((1, c, kh, kw), dtype=DTYPE)
        self._x = None

    def forward(self, x, training=True):
        self._x = x
        return ops.depthwise_conv_forward(x, ops.DepthwiseConvParams(self.params["weight"]))

    def backward(self, g):
        gx, gw = ops.depthwise_conv_backward(self._x, ops.DepthwiseConvParams(self.params["weight"]), g)
        self.grads["weight"] = gw
        return gx


class Norm(Layer):
    def __init__(self, name, spec: LayerSpec, c):
        super().__init__(name)
        self.kind = ops.norm_kind(spec.get("kind", "bn"))
        self.groups = int(spec.get("groups", 1))
        self.affine = bool(spec.get("affine", 1))
        if self.kind != "none" and self.affine:
            self.params["gamma"] = np.ones(c, dtype=DTYPE)
            self.params["beta"] = np.zeros(c, dtype=DTYPE)
        if self.kind == "bn":
            self.buffers["running_mean"] = np.zeros(c, dtype=DTYPE)
            self.buffers["running_var"] = np.ones(c, dtype=DTYPE)
        self.c = c
        self._cache = None

    def _p(self):
        return ops.NormParams(self.kind, self.c, self.params.get("gamma"), self.params.get("beta"),
                              self.buffers.get("running_mean"), self.buffers.get("running_var"),
                              groups=self.groups, affine=self.affine)

    def forward(self, x, training=True):
        p = self._p()
        out, cache = ops.norm_forward(x, p, "train" if training else "eval")
        if cache.running_mean is not None:
            self.buffers["running_mean"] = cache.running_mean
            self.buffers["running_var"] = cache.running_var
        self._cache = (x, p, cache)
        return out

    def backward(self, g):
        x, p, cache = self._cache
        gx, gg, gb = ops.norm_backward(x, p, g, cache)
        if gg is not None:
            self.grads["gamma"], self.grads["beta"] = gg, gb
        return gx


class Act(Layer):
    is_activation = True

    def __init__(self, name, spec: LayerSpec, c, rng):
        super().__init__(name)
        kind = str(spec.get("kind", "relu"))
        cfg = spec.funnel_config() if kind in ("frelu", "dwrelu") else None
        self.layer = ActivationLayer(kind, c, cfg, rng)
        self.params, self.buffers, self.grads = self.layer.params, self.layer.buffers, self.layer.grads

    def forward(self, x, training=True):
        return self.layer.forward(x, training)

    def backward(self, g):
        return self.layer.backward(g)


class Pool(Layer):
    def __init__(self, name, spec: LayerSpec):
        super().__init__(name)
        self.kind = str(spec.get("kind", "max"))
        self.k = int(spec.get("k", 2))
        self.stride = int(spec.get("stride", self.k))
        self.pad = int(spec.get("pad", 0))
        self._x = None

    def forward(self, x, training=True):
        self._x = x
        if self.kind == "gavg":
            return ops.global_avgpool_forward(x)
        return ops.pool2d_forward(x, self.kind, self.k, self.stride, self.pad)

    def backward(self, g):
        x = self._x
        if self.kind == "gavg":
            return ops.global_avgpool_backward(x.shape, g)
        k, s, p = self.k, self.stride, self.pad
        n, c, h, w = x.shape
        ho, wo = g.shape[2:]
        fill = -np.inf if self.kind == "max" else 0.0
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=fill)
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        if self.kind == "avg":
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s] += g / (k * k)
        else:
            out = ops.pool2d_forward(x, "max", k, s, p)
            taken = np.zeros(out.shape, dtype=bool)
            for di in range(k):
                for dj in range(k):
                    tap = xp[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s]
                    hit = (tap == out) & ~taken
                    taken |= hit
                    gxp[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s] += np.where(hit, g, 0.0)
        return np.ascontiguousarray(gxp[:, :, p:p + h, p:p + w])


class Linear(Layer):
    def __init__(self, name, spec: LayerSpec, fin, rng):
        super().__init__(name)
        fout = int(spec.get("out"))
        self.params["weight"] = math.sqrt(1.0 / fin) * rng.standard_normal((fout, fin), dtype=DTYPE)
        if spec.get("bias", 1):
            self.params["bias"] = np.zeros(fout, dtype=DTYPE)
        self._x = None

    def forward(self, x, training=True):
        self._x = x
        return ops.linear_forward(x.reshape(x.shape[0], -1), self.params["weight"], self.params.get("bias"))

    def backward(self, g):
        x = self._x
        gx, gw, gb = ops.linear_backward(x.reshape(x.shape[0], -1), self.params["weight"], g)
        self.grads["weight"] = gw
        if "bias" in self.params:
            self.grads["bias"] = gb
        return gx.reshape(x.shape)


class Sequential(Layer):
    def __init__(self, name, layers):
        super().__init__(name)
        self.layers = layers

    def forward(self, x, training=True):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def children(self):
        return self.layers


class Block(Layer):
    def __init__(self, name, body: Sequential, shortcut: Sequential | None, merge: str):
        super().__init__(name)
        self.body, self.shortcut, self.merge = body, shortcut, merge
        self._split = None

    def forward(self, x, training=True):
        a = self.body.forward(x, training)
        b = self.shortcut.forward(x, training) if self.shortcut else x
        if self.merge == "add":
            return a + b
        self._split = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, g):
        if self.merge == "add":
            ga = gb = g
        else:
            ga, gb = g[:, :self._split], g[:, self._split:]
        gx = self.body.backward(ga)
        return gx + (self.shortcut.backward(gb) if self.shortcut else gb)

    def children(self):
        return (self.body, self.shortcut) if self.shortcut else (self.body,)


def _build(layers: list[LayerSpec], shape, rng, prefix):
    built = []
    for spec in layers:
        name = prefix + spec.name
        c, h, w = shape
        if spec.kind == "conv":
            layer = Conv(name, spec, rng)
        elif spec.kind == "dwconv":
            layer = DWConv(name, spec, c, rng)
        elif spec.kind == "norm":
            layer = Norm(name, spec, c)
        elif spec.kind == "act":
            layer = Act(name, spec, c, rng)
        elif spec.kind == "pool":
            layer = Pool(name, spec)
        elif spec.kind == "linear":
            layer = Linear(name, spec, c * h * w, rng)
        elif spec.kind == "block":
            body, main = _build(spec.body, shape, rng, name + ".")
            if spec.shortcut:
                short, _ = _build(spec.shortcut, shape, rng, name + ".")
                short = Sequential(name + ".shortcut", short)
            else:
                short = None
            layer = Block(name, Sequential(name + ".body", body), short, spec.get("merge", "add"))
        else:
            raise ConfigError(f"cannot build layer kind {spec.kind!r}")
        shape = output_shape(ModelSpec("", shape, [spec]))
        built.append(layer)
    return built, shape


class Network(Sequential):
    """A trainable network; parameters are exposed under dotted layer names."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, input_shape=None):
        shape = tuple(input_shape or spec.input_shape)
        layers, self.out_shape = _build(spec.layers, shape, rng, "")
        super().__init__(spec.name, layers)
        self.spec = spec

    def leaves(self):
        def rec(layer):
            kids = layer.children()
            if not kids:
                yield layer
            for k in kids:
                yield from rec(k)
        return list(rec(self))

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.leaves() for k, v in l.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": l.grads.get(k, np.zeros_like(v))
                for l in self.leaves() for k, v in l.params.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.leaves() for k, v in l.buffers.items()}

    def activation_param_names(self) -> set[str]:
        return {f"{l.name}.{k}" for l in self.leaves() if l.is_activation for k in l.params}

    def set_param(self, name: str, value: np.ndarray) -> None:
        d, key = self._locate(name, "params")
        d[key] = value

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        d, key = self._locate(name, "buffers")
        d[key] = value

    def _locate(self, name, attr):
        for l in self.leaves():
            if name.startswith(l.name + "."):
                key = name[len(l.name) + 1:]
                if key in getattr(l, attr):
                    return getattr(l, attr), key
        raise KeyError(name)

    def num_params(self) -> int:
        return sum(v.size for v in self.named_params().values())
