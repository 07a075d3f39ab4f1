"""Activate fields, empirical receptive fields and the layout-coverage probe.

The symbolic side follows the recurrence for stacked funnel layers with a
``k x k`` window: after ``n`` layers a pixel can select any square field of side
``1, 1 + r, ..., 1 + n*r`` with ``r = k - 1``.  Interleaved convolutions are
ignored on purpose; the empirical tools stack funnel layers directly (identity
convolutions in between) so both sides describe the same model.

The layout probe is a package-defined metric.  For every pixel of a layout mask
the *required size* is the side of the largest odd axis-aligned square centred on
that pixel that fits inside the mask.  A pixel is covered when the available
field sizes contain one within ``r`` of it; the score is the covered fraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import activations as act
from .errors import ConfigError, InvalidArgument
from .tensor import DTYPE, make_rng

PROBE_DELTA = 1e-3
INFLUENCE_TOL = 1e-9
DEFAULT_DRAWS = 8
LAYOUTS = ("oblique_line", "arc", "axis_rect")


@dataclass(frozen=True)
class ActivateFieldSet:
    n_layers: int
    k: int
    sizes: tuple[int, ...]

    @property
    def r(self) -> int:
        return self.k - 1

    def __len__(self):
        return len(self.sizes)

    def __contains__(self, s):
        return s in self.sizes


def _check_k(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"window size must be an odd integer >= 1, got {k}")


def _field_sizes(n_layers: int, k: int) -> tuple[int, ...]:
    r = k - 1
    return tuple(sorted({1 + i * r for i in range(n_layers + 1)}))


def activate_field(n_layers: int, k: int) -> ActivateFieldSet:
    """Square field sizes selectable by a pixel after ``n_layers`` funnel layers."""
    _check_k(k)
    if n_layers < 1:
        raise InvalidArgument(f"n_layers must be >= 1, got {n_layers}")
    return ActivateFieldSet(n_layers, k, _field_sizes(n_layers, k))


# -- empirical receptive field ------------------------------------------------------

@dataclass
class FunnelStack:
    """``n_layers`` funnel layers with ``k x k`` windows and no normalization.

    ``weights`` pins the window weights (one ``(1, c, k, k)`` array per layer);
    left as None, every draw of :func:`empirical_receptive_field` samples new ones.
    """

    n_layers: int
    k: int = 3
    channels: int = 1
    weights: Optional[list[np.ndarray]] = None
    init_std: float = 0.5

    def __post_init__(self):
        _check_k(self.k)
        if self.n_layers < 0 or self.channels < 1:
            raise InvalidArgument("n_layers must be >= 0 and channels >= 1")
        if self.weights is not None:
            if len(self.weights) != self.n_layers:
                raise InvalidArgument(f"need {self.n_layers} weight arrays, got {len(self.weights)}")
            self.weights = [np.asarray(w, dtype=DTYPE).reshape(1, self.channels, self.k, self.k)
                            for w in self.weights]

    @property
    def config(self) -> act.FunnelConfig:
        return act.FunnelConfig(window=self.k, norm="none")

    def sample_weights(self, rng) -> list[np.ndarray]:
        if self.weights is not None:
            return self.weights
        shape = (1, self.channels, self.k, self.k)
        return [self.init_std * rng.standard_normal(shape) for _ in range(self.n_layers)]

    def forward(self, x: np.ndarray, weights: Sequence[np.ndarray]) -> np.ndarray:
        cfg = self.config
        for w in weights:
            x, _ = act.frelu_forward(x, cfg, {"weight": w}, {}, "eval")
        return x

    def bound(self) -> int:
        return 1 + self.n_layers * (self.k - 1)


@dataclass
class ReceptiveMask:
    target: tuple[int, int, int]
    mask: np.ndarray                       # (H, W) bool
    influence: np.ndarray = field(repr=False, default=None)  # max |d output| per pixel

    @property
    def extent(self) -> tuple[int, int]:
        rows, cols = np.nonzero(self.mask)
        if rows.size == 0:
            return 0, 0
        return int(rows.max() - rows.min() + 1), int(cols.max() - cols.min() + 1)

    def to_csv(self) -> str:
        return "".join(",".join("1" if v else "0" for v in row) + "\n" for row in self.mask)


def _influence(stack: FunnelStack, weights, x, target, delta):
    c, i, j = target
    _, ch, h, w = x.shape
    base = stack.forward(x, weights)[0, c, i, j]
    best = np.zeros((h, w), dtype=DTYPE)
    # every single-pixel perturbation of every channel, batched
    eye = np.eye(ch * h * w, dtype=DTYPE).reshape(ch * h * w, ch, h, w)
    for sign in (1.0, -1.0):
        out = stack.forward(x + sign * delta * eye, weights)[:, c, i, j]
        change = np.abs(out - base).reshape(ch, h, w).max(axis=0)
        best = np.maximum(best, change)
    return best


def empirical_receptive_field(stack: FunnelStack, target: Optional[tuple[int, int, int]] = None,
                              probe_input: Optional[np.ndarray] = None,
                              rng: Optional[np.random.Generator] = None, draws: int = DEFAULT_DRAWS,
                              delta: float = PROBE_DELTA, tol: float = INFLUENCE_TOL,
                              witness: bool = True) -> ReceptiveMask:
    """Input pixels whose perturbation by ``delta`` moves the target output.

    Influence is maximized over ``draws`` random (weights, input) pairs.  With
    ``witness`` an extra draw uses the configuration that reaches the symbolic
    bound: positive window weights and a positive input with a negative centre.
    A fixed ``probe_input`` replaces the random inputs.
    """
    if draws < 1:
        raise InvalidArgument("draws must be >= 1")
    rng = rng if rng is not None else make_rng(0)
    if probe_input is not None:
        probe_input = np.asarray(probe_input, dtype=DTYPE)
        if probe_input.ndim != 4 or probe_input.shape[0] != 1 or probe_input.shape[1] != stack.channels:
            raise InvalidArgument(f"probe_input must be (1, {stack.channels}, H, W), got {probe_input.shape}")
        h, w = probe_input.shape[2:]
    else:
        h = w = stack.bound() + 4
    if target is None:
        target = (0, h // 2, w // 2)
    c, i, j = target
    if not (0 <= c < stack.channels and 0 <= i < h and 0 <= j < w):
        raise IndexError(f"target {target} outside output of shape ({stack.channels}, {h}, {w})")
    shape = (1, stack.channels, h, w)
    total = np.zeros((h, w), dtype=DTYPE)
    for _ in range(draws):
        x = probe_input if probe_input is not None else rng.standard_normal(shape)
        total = np.maximum(total, _influence(stack, stack.sample_weights(rng), x, target, delta))
    if witness:
        weights = stack.weights if stack.weights is not None else \
            [np.full((1, stack.channels, stack.k, stack.k), 0.5) for _ in range(stack.n_layers)]
        x = probe_input.copy() if probe_input is not None else np.ones(shape)
        if probe_input is None:
            x[0, c, i, j] = -1.0
        total = np.maximum(total, _influence(stack, weights, x, target, delta))
    return ReceptiveMask(tuple(target), total > tol, total)


# -- layout probe -----------------------------------------------------------------

def _layout_mask(shape: str, size: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE)
    cy, cx = rng.uniform(0.4, 0.6, 2) * size
    if shape == "axis_rect":
        thick = int(rng.integers(1, 4))
        length = int(rng.integers(size // 3, 2 * size // 3))
        top, left = int(cy) - thick // 2, int(cx) - length // 2
        m = np.zeros((size, size), dtype=bool)
        m[top:top + thick, left:left + length] = True
        return m if rng.integers(2) else m.T.copy()
    if shape == "oblique_line":
        angle = rng.integers(2) * np.pi / 2 + rng.uniform(np.pi / 9, 7 * np.pi / 18)
        thick = rng.uniform(2.0, 12.0)
        length = rng.uniform(0.5, 0.8) * size
        dy, dx = np.sin(angle), np.cos(angle)
        py, px = yy - cy, xx - cx
        t = np.clip(py * dy + px * dx, -length / 2, length / 2)
        return np.hypot(py - t * dy, px - t * dx) <= thick / 2
    if shape == "arc":
        radius = rng.uniform(0.2, 0.4) * size
        thick = rng.uniform(2.0, 10.0)
        start, span = rng.uniform(0, 2 * np.pi), rng.uniform(np.deg2rad(100), np.deg2rad(220))
        py, px = yy - cy, xx - cx
        ang = np.mod(np.arctan2(py, px) - start, 2 * np.pi)
        return (np.abs(np.hypot(py, px) - radius) <= thick / 2) & (ang <= span)
    raise ConfigError(f"unknown layout {shape!r}; expected one of {LAYOUTS}")


def required_sizes(mask: np.ndarray) -> np.ndarray:
    """Side of the largest odd square centred on each pixel inside ``mask`` (0 outside)."""
    cur = np.asarray(mask, dtype=bool)
    out = np.where(cur, 1, 0)
    s = 1
    while cur.any():
        p = np.pad(cur, 1, constant_values=False)
        h, w = cur.shape
        eroded = np.ones_like(cur)
        for di in range(3):
            for dj in range(3):
                eroded &= p[di:di + h, dj:dj + w]
        s += 2
        out[eroded] = s
        cur = eroded
    return out


def layout_probe(shape: str, n_layers: int, k: int = 3, trials: int = 32,
                 rng: Optional[np.random.Generator] = None, image_size: int = 32) -> float:
    """Fraction of layout pixels whose required size is reachable within ``r``.

    ``n_layers = 0`` is the plain-ReLU baseline with the single size 1.
    """
    _check_k(k)
    if trials < 1:
        raise InvalidArgument("trials must be >= 1")
    if n_layers < 0:
        raise InvalidArgument("n_layers must be >= 0")
    if shape not in LAYOUTS:
        raise ConfigError(f"unknown layout {shape!r}; expected one of {LAYOUTS}")
    rng = rng if rng is not None else make_rng(0)
    sizes = np.array(_field_sizes(n_layers, k))
    r = k - 1
    covered = total = 0
    for _ in range(trials):
        req = required_sizes(_layout_mask(shape, image_size, rng))
        need = req[req > 0]
        ok = np.min(np.abs(need[:, None] - sizes[None, :]), axis=1) <= r
        covered += int(ok.sum())
        total += need.size
    return covered / total if total else 1.0
