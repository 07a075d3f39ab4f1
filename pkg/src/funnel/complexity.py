"""Model descriptions plus exact parameter and FLOP counting.

FLOPs follow the multiply-accumulate convention: a dense ``k x k``
convolution from ``C_in`` to ``C_out`` channels on an ``H' x W'`` output costs
``C_in * C_out * k * k * H' * W'``, a funnel window adds ``C * k_h * k_w * H * W``.
Normalization, activation and pooling arithmetic is reported separately as
``other_ops`` and never enters the headline figure.

Parameters are split into ``weights`` (convolutions, windows, PReLU slopes,
linear layers) and ``norm`` (the affine scale/shift of normalization layers).
:func:`count_params` returns their sum by default; the table convention used
for ResNet-style summaries leaves the norm affine out (``norm=False``).

Text format, one layer per line::

    input 3x224x224
    conv1 conv cin=3 cout=64 k=7 stride=2 pad=3
    bn1 norm kind=bn c=64
    relu1 act kind=relu
    block res2a merge=add
      ... main path ...
    shortcut
      ... projection (omit the section for identity) ...
    end

Blank lines and ``#`` comments are ignored.  ``key=value`` pairs take ints,
``0``/``1`` booleans, or bare words.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from . import activations as act
from .errors import ConfigError, FormatError, ValidationError

LAYER_KINDS = ("conv", "dwconv", "norm", "act", "pool", "linear", "block")

_NORM_KINDS = ("bn", "ln", "in", "gn", "none")


@dataclass
class LayerSpec:
    name: str
    kind: str
    attrs: dict = field(default_factory=dict)
    body: list["LayerSpec"] = field(default_factory=list)
    shortcut: list["LayerSpec"] = field(default_factory=list)

    def get(self, key, default=None):
        return self.attrs.get(key, default)

    def funnel_config(self) -> act.FunnelConfig:
        a = self.attrs
        return act.FunnelConfig(
            window=a.get("window", 3), fusion=a.get("fusion", "max"),
            pair_combine=a.get("combine", "max"), condition=a.get("condition", "param"),
            norm=a.get("norm", "bn"), share_norm=bool(a.get("share_norm", 0)),
            norm_affine=bool(a.get("norm_affine", 1)), groups=int(a.get("groups", 1)),
            init_std=float(a.get("init_std", 0.1)),
            init_value=float(a["init_value"]) if "init_value" in a else None,
        )


@dataclass
class ModelSpec:
    name: str
    input_shape: Optional[tuple[int, int, int]]
    layers: list[LayerSpec]

    def walk(self) -> Iterator[LayerSpec]:
        def rec(layers):
            for layer in layers:
                yield layer
                if layer.kind == "block":
                    yield from rec(layer.body)
                    yield from rec(layer.shortcut)
        return rec(self.layers)


# -- parsing -------------------------------------------------------------------

def parse_shape(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"bad shape {text!r}; expected CxHxW") from None
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"bad shape {text!r}; expected CxHxW with positive dims")
    return dims  # type: ignore[return-value]


def _value(v: str):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


def parse_model(text: str, name: str = "model") -> ModelSpec:
    """Parse the line-oriented model format; raises :class:`FormatError`."""
    root: list[LayerSpec] = []
    stack: list[tuple[LayerSpec, str]] = []
    input_shape = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        target = root if not stack else getattr(stack[-1][0], stack[-1][1])
        if tok[0] == "input":
            if len(tok) != 2:
                raise FormatError("usage: input CxHxW", lineno)
            input_shape = parse_shape(tok[1])
        elif tok[0] == "block":
            if len(tok) < 2:
                raise FormatError("block needs a name", lineno)
            blk = LayerSpec(tok[1], "block", _attrs(tok[2:], lineno))
            blk.attrs.setdefault("merge", "add")
            target.append(blk)
            stack.append((blk, "body"))
        elif tok[0] == "shortcut":
            if not stack or stack[-1][1] != "body":
                raise FormatError("shortcut outside a block", lineno)
            stack[-1] = (stack[-1][0], "shortcut")
        elif tok[0] == "end":
            if not stack:
                raise FormatError("end without block", lineno)
            stack.pop()
        else:
            if len(tok) < 2:
                raise FormatError(f"expected 'name kind key=value...', got {line!r}", lineno)
            if tok[1] not in LAYER_KINDS or tok[1] == "block":
                raise FormatError(f"unknown layer kind {tok[1]!r}", lineno)
            target.append(LayerSpec(tok[0], tok[1], _attrs(tok[2:], lineno)))
    if stack:
        raise FormatError(f"unterminated block {stack[-1][0].name!r}", "EOF")
    return ModelSpec(name, input_shape, root)


def _attrs(tokens, lineno) -> dict:
    out = {}
    for t in tokens:
        if "=" not in t:
            raise FormatError(f"expected key=value, got {t!r}", lineno)
        k, v = t.split("=", 1)
        out[k] = _value(v)
    return out


def format_model(m: ModelSpec) -> str:
    lines = []
    if m.input_shape:
        lines.append("input " + "x".join(map(str, m.input_shape)))

    def rec(layers, depth):
        pad = "  " * depth
        for layer in layers:
            kv = " ".join(f"{k}={v}" for k, v in layer.attrs.items())
            if layer.kind == "block":
                lines.append(f"{pad}block {layer.name} {kv}".rstrip())
                rec(layer.body, depth + 1)
                if layer.shortcut:
                    lines.append(f"{pad}shortcut")
                    rec(layer.shortcut, depth + 1)
                lines.append(f"{pad}end")
            else:
                lines.append(f"{pad}{layer.name} {layer.kind} {kv}".rstrip())
    rec(m.layers, 0)
    return "\n".join(lines) + "\n"


# -- shape propagation and counting ------------------------------------------------------

@dataclass
class LayerCount:
    name: str
    kind: str
    out_shape: tuple[int, int, int]
    params: int = 0
    norm_params: int = 0
    flops: int = 0
    other_ops: int = 0


@dataclass
class Counts:
    params: int          # weights only (conv, windows, slopes, linear)
    norm_params: int     # affine scale/shift of norm layers
    flops: int           # MACs
    other_ops: int
    rows: list[LayerCount]

    @property
    def total_params(self) -> int:
        return self.params + self.norm_params


def _window_sizes(layer: LayerSpec) -> list[tuple[int, int]]:
    if "kh" in layer.attrs or "kw" in layer.attrs:
        return [(int(layer.get("kh", 1)), int(layer.get("kw", 1)))]
    k = layer.get("k", 3)
    if str(k) == act.PAIR:
        return [(1, 3), (3, 1)]
    return [(int(k), int(k))]


class _Walker:
    """Propagates shapes and accumulates counts; collects diagnostics."""

    def __init__(self):
        self.rows: list[LayerCount] = []
        self.diags: list[str] = []

    def fail(self, layer, msg):
        self.diags.append(f"{layer.name}: {msg}")

    def run(self, layers, shape, prefix=""):
        for layer in layers:
            if shape is None:
                return None
            shape = self.layer(layer, shape, prefix)
        return shape

    def layer(self, layer: LayerSpec, shape, prefix):
        c, h, w = shape
        name = prefix + layer.name
        row = LayerCount(name, layer.kind, shape)
        k = layer.kind
        try:
            if k == "conv":
                cin, cout = int(layer.get("cin", c)), int(layer.get("cout", -1))
                if cout < 1:
                    self.fail(layer, "conv needs cout")
                    return None
                if cin != c:
                    self.fail(layer, f"conv expects cin={cin} but receives {c} channels")
                    return None
                kh = int(layer.get("kh", layer.get("k", 1)))
                kw = int(layer.get("kw", layer.get("k", 1)))
                s, p = int(layer.get("stride", 1)), int(layer.get("pad", 0))
                ho, wo = (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1
                if ho < 1 or wo < 1:
                    self.fail(layer, f"kernel {kh}x{kw} does not fit input {h}x{w}")
                    return None
                row.params = cin * cout * kh * kw + (cout if layer.get("bias", 0) else 0)
                row.flops = cin * cout * kh * kw * ho * wo
                shape = (cout, ho, wo)
            elif k == "dwconv":
                ch = int(layer.get("c", c))
                if ch != c:
                    self.fail(layer, f"depthwise conv declared with {ch} channels but receives {c}")
                    return None
                (kh, kw), = _window_sizes(layer)
                row.params = c * kh * kw
                row.flops = c * kh * kw * h * w
            elif k == "norm":
                kind = str(layer.get("kind", "bn"))
                if kind not in _NORM_KINDS:
                    self.fail(layer, f"unknown norm kind {kind!r}")
                    return None
                ch = int(layer.get("c", c))
                if ch != c:
                    self.fail(layer, f"norm declared with {ch} channels but receives {c}")
                    return None
                g = int(layer.get("groups", 1))
                if kind == "gn" and c % g:
                    self.fail(layer, f"{c} channels not divisible into {g} groups")
                    return None
                if kind != "none" and layer.get("affine", 1):
                    row.norm_params = 2 * c
                row.other_ops = 0 if kind == "none" else 2 * c * h * w
            elif k == "act":
                kind = str(layer.get("kind", "relu"))
                if kind not in act.ACTIVATION_KINDS:
                    self.fail(layer, f"unknown activation {kind!r}")
                    return None
                ch = int(layer.get("c", c))
                if ch != c:
                    self.fail(layer, f"activation declared with {ch} channels but receives {c}")
                    return None
                row.other_ops = c * h * w
                if kind == "prelu":
                    row.params = c
                elif kind in ("frelu", "dwrelu"):
                    cfg = layer.funnel_config()
                    if cfg.norm == "gn" and c % cfg.groups:
                        self.fail(layer, f"{c} channels not divisible into {cfg.groups} groups")
                        return None
                    if cfg.parametric:
                        for _, kh, kw in cfg.branches():
                            row.params += c * kh * kw
                            row.flops += c * kh * kw * h * w
                        if cfg.norm_affine:
                            row.norm_params = 2 * c * len(cfg.norm_prefixes())
                    else:
                        row.other_ops += sum(c * kh * kw * h * w for _, kh, kw in cfg.branches())
            elif k == "pool":
                kind = str(layer.get("kind", "max"))
                if kind == "gavg":
                    row.other_ops = c * h * w
                    shape = (c, 1, 1)
                elif kind in ("max", "avg"):
                    kk, s = int(layer.get("k", 2)), int(layer.get("stride", layer.get("k", 2)))
                    p = int(layer.get("pad", 0))
                    ho, wo = (h + 2 * p - kk) // s + 1, (w + 2 * p - kk) // s + 1
                    if ho < 1 or wo < 1:
                        self.fail(layer, f"pool {kk}x{kk} does not fit input {h}x{w}")
                        return None
                    row.other_ops = c * kk * kk * ho * wo
                    shape = (c, ho, wo)
                else:
                    self.fail(layer, f"unknown pool kind {kind!r}")
                    return None
            elif k == "linear":
                fin, fout = int(layer.get("in", c * h * w)), int(layer.get("out", 0))
                if fin != c * h * w:
                    self.fail(layer, f"linear expects in={fin} but receives {c * h * w} features")
                    return None
                if fout < 1:
                    self.fail(layer, "linear needs out")
                    return None
                row.params = fin * fout + (fout if layer.get("bias", 1) else 0)
                row.flops = fin * fout
                shape = (fout, 1, 1)
            elif k == "block":
                self.rows.append(row)
                main = self.run(layer.body, shape, name + ".")
                side = self.run(layer.shortcut, shape, name + ".") if layer.shortcut else shape
                if main is None or side is None:
                    return None
                merge = layer.get("merge", "add")
                if merge == "add":
                    if main != side:
                        self.fail(layer, f"cannot add branches of shapes {main} and {side}")
                        return None
                    row.other_ops = main[0] * main[1] * main[2]
                    return main
                if merge == "concat":
                    if main[1:] != side[1:]:
                        self.fail(layer, f"cannot concat branches of shapes {main} and {side}")
                        return None
                    return (main[0] + side[0], main[1], main[2])
                self.fail(layer, f"unknown merge {merge!r}")
                return None
            else:
                self.fail(layer, f"unknown layer kind {k!r}")
                return None
        except (ConfigError, ValueError, TypeError) as e:
            self.fail(layer, str(e))
            return None
        row.out_shape = shape
        self.rows.append(row)
        return shape


def validate(m: ModelSpec, input_shape: Optional[tuple[int, int, int]] = None) -> list[str]:
    """Return a list of diagnostics; an empty list means the spec is valid."""
    shape = input_shape or m.input_shape
    if not m.layers:
        return ["empty model"]
    if shape is None:
        return ["no input shape given"]
    walker = _Walker()
    walker.run(m.layers, tuple(shape))
    return walker.diags


def output_shape(m: ModelSpec, input_shape=None):
    walker = _Walker()
    out = walker.run(m.layers, tuple(input_shape or m.input_shape))
    if walker.diags:
        raise ValidationError(walker.diags)
    return out


def count(m: ModelSpec, input_shape: Optional[tuple[int, int, int]] = None) -> Counts:
    shape = input_shape or m.input_shape
    diags = validate(m, shape)
    if diags:
        raise ValidationError(diags)
    walker = _Walker()
    walker.run(m.layers, tuple(shape))
    rows = walker.rows
    return Counts(sum(r.params for r in rows), sum(r.norm_params for r in rows),
                  sum(r.flops for r in rows), sum(r.other_ops for r in rows), rows)


def count_params(m: ModelSpec, norm: bool = True, input_shape=None) -> int:
    """Learnable parameter count; ``norm=False`` drops the norm affine terms."""
    c = count(m, input_shape)
    return c.total_params if norm else c.params


def count_flops(m: ModelSpec, input_shape=None) -> int:
    return count(m, input_shape).flops


def fmt_params(n: int) -> str:
    return f"{_round_half_up(n / 1e6, 1)}M"


def fmt_flops(n: int) -> str:
    g = n / 1e9
    if g >= 5:
        return f"{_round_half_up(g, 1)}G"
    return f"{_round_half_up(g, 2):.2f}G"


def _round_half_up(v: float, digits: int) -> float:
    q = 10 ** digits
    return math.floor(v * q + 0.5) / q


def breakdown_csv(c: Counts) -> str:
    lines = ["name,kind,out_shape,params,norm_params,flops,other_ops"]
    for r in c.rows:
        lines.append(f"{r.name},{r.kind},{'x'.join(map(str, r.out_shape))},"
                     f"{r.params},{r.norm_params},{r.flops},{r.other_ops}")
    return "\n".join(lines) + "\n"


# -- builtin models --------------------------------------------------------------

def _act(name, kind, c, funnel: dict | None = None) -> LayerSpec:
    attrs = {"kind": kind, "c": c}
    if kind in ("frelu", "dwrelu"):
        attrs.update(funnel or {"window": 3, "norm": "bn"})
    return LayerSpec(name, "act", attrs)


def _conv(name, cin, cout, k, stride=1, pad=None):
    return LayerSpec(name, "conv", {"cin": cin, "cout": cout, "k": k, "stride": stride,
                                    "pad": (k - 1) // 2 if pad is None else pad, "bias": 0})


def _bn(name, c):
    return LayerSpec(name, "norm", {"kind": "bn", "c": c})


# FReLU sites inside a bottleneck: after the first 1x1 conv, after the 3x3 conv,
# and after the residual addition.
BOTTLENECK_SITES = ("1x1", "3x3", "out")


def resnet(depth: int, activation: str = "relu", frelu_stages=(2, 3, 4),
           frelu_sites=("3x3",), num_classes: int = 1000) -> ModelSpec:
    """Bottleneck ResNet with the stride on the first 1x1 conv of each stage.

    With ``activation='frelu'`` only the ReLUs at ``frelu_sites`` inside the
    bottlenecks of ``frelu_stages`` are replaced; every other one stays ReLU.
    Other activation kinds replace every ReLU.
    """
    blocks = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}[depth]
    scalar = activation if activation != "frelu" else "relu"

    def a(name, c, stage, site):
        if activation == "frelu" and stage in frelu_stages and site in frelu_sites:
            return _act(name, "frelu", c)
        return _act(name, scalar, c)

    layers = [_conv("conv1", 3, 64, 7, 2, 3), _bn("bn1", 64), _act("act1", scalar, 64),
              LayerSpec("pool1", "pool", {"kind": "max", "k": 3, "stride": 2, "pad": 1})]
    cin = 64
    for si, n in enumerate(blocks):
        stage = si + 2
        width = 64 * 2 ** si
        cout = width * 4
        for bi in range(n):
            stride = 2 if bi == 0 and si > 0 else 1
            nm = f"res{stage}{chr(ord('a') + bi) if n <= 26 else bi}"
            body = [
                _conv("conv_a", cin, width, 1, stride, 0), _bn("bn_a", width), a("act_a", width, stage, "1x1"),
                _conv("conv_b", width, width, 3, 1, 1), _bn("bn_b", width), a("act_b", width, stage, "3x3"),
                _conv("conv_c", width, cout, 1, 1, 0), _bn("bn_c", cout),
            ]
            short = [_conv("proj", cin, cout, 1, stride, 0), _bn("bn_proj", cout)] if bi == 0 else []
            layers.append(LayerSpec(nm, "block", {"merge": "add"}, body, short))
            layers.append(a(nm + "_act", cout, stage, "out"))
            cin = cout
    layers += [LayerSpec("gap", "pool", {"kind": "gavg"}),
               LayerSpec("fc", "linear", {"in": cin, "out": num_classes, "bias": 1})]
    return ModelSpec(f"resnet{depth}-{activation}", (3, 224, 224), layers)


TOY_WIDTHS = (8, 8, 8, 8)
TOY_STRIDES = (1, 2, 2, 1)


def toy_cnn(activation: str = "relu", funnel: dict | None = None, widths=TOY_WIDTHS,
            in_channels: int = 1, image_size: int = 32, num_classes: int = 4,
            name: str | None = None, strides=TOY_STRIDES) -> ModelSpec:
    """Conv3x3 -> BN -> activation blocks, global average pool, linear head."""
    if len(strides) != len(widths):
        raise ConfigError("toy_cnn needs one stride per block")
    layers = []
    c = in_channels
    for i, (wd, st) in enumerate(zip(widths, strides), 1):
        layers += [_conv(f"conv{i}", c, wd, 3, st, 1), _bn(f"bn{i}", wd), _act(f"act{i}", activation, wd, funnel)]
        c = wd
    layers += [LayerSpec("gap", "pool", {"kind": "gavg"}),
               LayerSpec("fc", "linear", {"in": c, "out": num_classes, "bias": 1})]
    return ModelSpec(name or f"toy-cnn-{activation}", (in_channels, image_size, image_size), layers)


TOY_VARIANTS = {
    "relu": ("relu", None),
    "prelu": ("prelu", None),
    "swish": ("swish", None),
    "frelu": ("frelu", {"window": 3, "norm": "bn"}),
}


def builtin_models() -> dict[str, ModelSpec]:
    models = {}
    for depth in (50, 101):
        for a in ("relu", "prelu", "swish", "frelu"):
            m = resnet(depth, a)
            models[m.name] = m
    for key, (kind, funnel) in TOY_VARIANTS.items():
        models[f"toy-cnn-{key}"] = toy_cnn(kind, funnel, name=f"toy-cnn-{key}")
    return models


def resolve_model(ref: str) -> ModelSpec:
    """Look ``ref`` up among the builtins, else read it as a model file."""
    models = builtin_models()
    if ref in models:
        return models[ref]
    path = Path(ref)
    if path.is_file():
        return parse_model(path.read_text(), path.stem)
    raise ConfigError(f"unknown model {ref!r}; builtins: {', '.join(sorted(models))}")
