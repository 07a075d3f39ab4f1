"""SGD with momentum and classic L2 weight decay folded into the gradient."""

from __future__ import annotations

from collections.abc import Collection

import numpy as np

from .errors import ConfigError, ShapeError

SCHEDULES = ("constant", "linear_decay")


def lr_at(lr: float, schedule: str, t: int, total: int) -> float:
    """Learning rate for 0-based iteration ``t`` of ``total``."""
    if schedule == "constant":
        return lr
    if schedule == "linear_decay":
        return lr * (1.0 - t / total)
    raise ConfigError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")


def sgd_step(params: dict, grads: dict, bufs: dict, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, no_decay: Collection[str] = ()):
    """One momentum-SGD step; returns new ``(params, bufs)`` dicts.

    ``buf <- momentum * buf + grad + weight_decay * param`` then
    ``param <- param - lr * buf``.  Names in ``no_decay`` skip weight decay.
    """
    new_p, new_b = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        b = bufs.get(name)
        if b is None:
            b = np.zeros_like(p)
        elif b.shape != p.shape:
            raise ShapeError(f"{name}: momentum buffer shape {b.shape} != param shape {p.shape}")
        d = g if weight_decay == 0 or name in no_decay else g + weight_decay * p
        b = momentum * b + d
        new_b[name] = b
        new_p[name] = p - lr * b
    return new_p, new_b
