"""Desk-scale supervised training and evaluation."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from . import ops
from .complexity import ModelSpec, format_model, parse_model, resolve_model
from .data import Dataset, load_idx_dir, synth_layouts
from .errors import ConfigError, NumericError
from .network import Network
from .optim import SCHEDULES, lr_at, sgd_step
from .tensor import make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Training hyperparameters.

    lr 0.1 with linear decay and weight decay 1e-4 are the usual large-scale
    settings; batch size and iteration count are sized for the toy task.
    ``dataset`` is ``synth`` or a directory of IDX files.
    """

    model: str = "toy-cnn-frelu"
    dataset: str = "synth"
    lr: float = 0.1
    schedule: str = "linear_decay"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_activation_params: bool = False
    batch_size: int = 32
    iterations: int = 500
    eval_every: int = 100
    seed: int = 0
    data_seed: int = 1234
    n_train: int = 8000
    n_test: int = 2000
    image_size: int = 32

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.batch_size < 1 or self.iterations < 0 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1, iterations >= 0")

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                raise ConfigError(f"line {lineno}: unknown config key {k!r}")
            kw[k] = _parse(types[k], v)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(typ, v: str):
    typ = str(typ)
    if typ == "bool":
        if v.lower() not in ("0", "1", "true", "false"):
            raise ConfigError(f"bad boolean {v!r}")
        return v.lower() in ("1", "true")
    if typ == "int":
        return int(v)
    if typ == "float":
        return float(v)
    return v


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]
    checkpoint: ckpt.Checkpoint
    network: Network
    initial_loss: float
    final_loss: float
    test_accuracy: float
    per_class: list[float]
    bn_gap: float = 0.0

    def history_csv(self) -> str:
        return "iter,loss,acc\n" + "".join(f"{i},{l!r},{a!r}\n" for i, l, a in self.history)


class TrainingDiverged(NumericError):
    def __init__(self, iteration: int, last_good: ckpt.Checkpoint):
        super().__init__(f"loss became non-finite at iteration {iteration}; "
                         f"last good checkpoint is from iteration {last_good.iteration}")
        self.iteration = iteration
        self.last_good = last_good


def load_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synth":
        rng = make_rng(cfg.data_seed)
        train = synth_layouts(cfg.n_train, cfg.image_size, rng, split="train")
        test = synth_layouts(cfg.n_test, cfg.image_size, rng, split="test")
        return train, test
    d = Path(cfg.dataset)
    if not d.is_dir():
        raise ConfigError(f"dataset must be 'synth' or a directory of IDX files, got {cfg.dataset!r}")
    train = load_idx_dir(d, "train")
    test = load_idx_dir(d, "test", train.num_classes)
    return train, test


def evaluate(net: Network, ds: Dataset, batch_size: int = 500):
    """Top-1 accuracy and per-class accuracy with eval-mode normalization."""
    n_out = net.out_shape[0]
    if ds.num_classes > n_out or (len(ds) and ds.labels.max() >= n_out):
        raise ConfigError(f"dataset has {ds.num_classes} classes, model predicts {n_out}")
    preds = np.empty(len(ds), dtype=np.int64)
    for s in range(0, len(ds), batch_size):
        preds[s:s + batch_size] = net.forward(ds.images[s:s + batch_size], training=False).argmax(axis=1)
    correct = preds == ds.labels
    per_class = [float(correct[ds.labels == c].mean()) if np.any(ds.labels == c) else float("nan")
                 for c in range(ds.num_classes)]
    return float(correct.mean()) if len(ds) else float("nan"), per_class


def network_from_checkpoint(ck: ckpt.Checkpoint) -> Network:
    spec = parse_model(ck.model_text, ck.model_name)
    net = Network(spec, make_rng(0))
    for k, v in ck.params.items():
        net.set_param(k, v.copy())
    for k, v in ck.buffers.items():
        net.set_buffer(k, v.copy())
    return net


def evaluate_checkpoint(ck: ckpt.Checkpoint, ds: Dataset):
    return evaluate(network_from_checkpoint(ck), ds)


def _snapshot(net, spec, cfg, t, bufs, rng, perm, cursor) -> ckpt.Checkpoint:
    return ckpt.Checkpoint(
        spec.name, format_model(spec), cfg.to_text(), t,
        {k: v.copy() for k, v in net.named_params().items()},
        {k: v.copy() for k, v in bufs.items()},
        {k: v.copy() for k, v in net.named_buffers().items()},
        rng.bit_generator.state, None if perm is None else perm.copy(), cursor,
    )


def train(cfg: TrainConfig, model: Optional[ModelSpec] = None,
          data: Optional[tuple[Dataset, Dataset]] = None,
          resume: Optional[ckpt.Checkpoint] = None,
          checkpoint_path: Optional[str | Path] = None,
          stop_at: Optional[int] = None) -> TrainResult:
    """Train ``model`` (default: resolved from ``cfg.model``) on ``cfg.dataset``.

    Deterministic given ``cfg.seed``: the same rng initializes the network
    and then draws the minibatch permutations.  ``stop_at`` ends the run early
    (the schedule still spans ``cfg.iterations``), which is how resumable
    partial runs are produced.
    """
    spec = model or resolve_model(cfg.model)
    train_ds, test_ds = data or load_datasets(cfg)
    rng = make_rng(cfg.seed)
    net = Network(spec, rng, train_ds.images.shape[1:])
    bufs: dict[str, np.ndarray] = {}
    perm, cursor, start = None, 0, 0
    if resume is not None:
        for k, v in resume.params.items():
            net.set_param(k, v.copy())
        for k, v in resume.buffers.items():
            net.set_buffer(k, v.copy())
        bufs = {k: v.copy() for k, v in resume.momentum.items()}
        rng.bit_generator.state = resume.rng_state
        perm = None if resume.sampler_perm is None else resume.sampler_perm.copy()
        cursor, start = resume.sampler_cursor, resume.iteration
    no_decay = set() if cfg.decay_activation_params else net.activation_param_names()
    n = len(train_ds)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    history: list[tuple[int, float, float]] = []
    last_good = _snapshot(net, spec, cfg, start, bufs, rng, perm, cursor)
    interval: list[float] = []
    initial_loss = final_loss = float("nan")
    xb = yb = None
    for t in range(start, end):
        if perm is None or cursor + cfg.batch_size > n:
            perm, cursor = rng.permutation(n), 0
        idx = perm[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        xb, yb = train_ds.images[idx], train_ds.labels[idx]
        logits = net.forward(xb, training=True)
        loss, grad = ops.softmax_cross_entropy(logits, yb)
        if not math.isfinite(loss):
            if checkpoint_path is not None:
                ckpt.save(checkpoint_path, last_good)
            raise TrainingDiverged(t, last_good)
        if t == start:
            initial_loss = loss
        interval.append(loss)
        net.backward(grad)
        params = net.named_params()
        new_p, bufs = sgd_step(params, net.named_grads(), bufs,
                               lr_at(cfg.lr, cfg.schedule, t, cfg.iterations),
                               cfg.momentum, cfg.weight_decay, no_decay)
        for k, v in new_p.items():
            np.copyto(params[k], v)
        if (t + 1) % cfg.eval_every == 0 or t + 1 == end:
            acc, _ = evaluate(net, test_ds)
            final_loss = float(np.mean(interval))
            history.append((t + 1, final_loss, acc))
            log.info("iter %d loss %.4f acc %.4f", t + 1, final_loss, acc)
            interval = []
            last_good = _snapshot(net, spec, cfg, t + 1, bufs, rng, perm, cursor)
    final = _snapshot(net, spec, cfg, end, bufs, rng, perm, cursor)
    acc, per_class = evaluate(net, test_ds)
    gap = 0.0
    if xb is not None:
        train_logits = net.forward(xb, training=True)
        eval_logits = net.forward(xb, training=False)
        # the extra train-mode forward must not leak into the saved state
        for k, v in final.buffers.items():
            net.set_buffer(k, v.copy())
        gap = float(np.max(np.abs(train_logits - eval_logits)) / (np.std(train_logits) + 1e-12))
    if checkpoint_path is not None:
        ckpt.save(checkpoint_path, final)
    return TrainResult(history, final, net, initial_loss, final_loss, acc, per_class, gap)
