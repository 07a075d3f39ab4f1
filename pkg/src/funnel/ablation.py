"""Ablation suites over the funnel activation, trained on the toy CNN.

Each suite is a list of labelled variants.  Every variant is trained once per
seed on the same data; results come out as per-run rows and as one mean/sd
summary row per variant.
"""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, replace
from typing import Callable, Optional

from .activations import PAIR
from .complexity import ModelSpec, count_params, toy_cnn
from .errors import ConfigError
from .trainer import TrainConfig, load_datasets, train


@dataclass(frozen=True)
class Variant:
    model: str          # row letter
    label: str
    kind: str           # activation kind
    funnel: Optional[dict] = None

    def spec(self, suite: str) -> ModelSpec:
        return toy_cnn(self.kind, self.funnel, name=f"toy-{suite}-{self.model}")


_PARAM = {"window": 3, "norm": "bn"}

SUITES: dict[str, tuple[Variant, ...]] = {
    "condition": (
        Variant("A", "Max(x, ParamPool(x))", "frelu", _PARAM),
        # pooling conditions carry no parameters, so no norm either
        Variant("B", "Max(x, MaxPool(x))", "frelu", {"window": 3, "condition": "maxpool", "norm": "none"}),
        Variant("C", "Max(x, AvgPool(x))", "frelu", {"window": 3, "condition": "avgpool", "norm": "none"}),
        Variant("D", "Sum(x, ParamPool(x))", "frelu", {**_PARAM, "fusion": "sum"}),
        Variant("E", "Max(DW(x), 0)", "dwrelu", _PARAM),
    ),
    "fusion": (
        Variant("A", "Max", "frelu", _PARAM),
        Variant("D", "Sum", "frelu", {**_PARAM, "fusion": "sum"}),
    ),
    "window": (
        # a centred 1x1 window without norm is PReLU with slope 0.25
        Variant("A", "1×1", "frelu", {"window": 1, "norm": "none", "init_value": 0.25}),
        Variant("B", "3×3", "frelu", _PARAM),
        Variant("C", "5×5", "frelu", {"window": 5, "norm": "bn"}),
        Variant("D", "7×7", "frelu", {"window": 7, "norm": "bn"}),
        Variant("E", "Sum(1×3,3×1)", "frelu", {"window": PAIR, "combine": "sum", "norm": "bn"}),
        Variant("F", "Max(1×3,3×1)", "frelu", {"window": PAIR, "combine": "max", "norm": "bn"}),
    ),
    "norm": (
        Variant("-", "-", "frelu", {"window": 3, "norm": "none"}),
        Variant("BN", "BN", "frelu", _PARAM),
        Variant("LN", "LN", "frelu", {"window": 3, "norm": "ln"}),
        Variant("IN", "IN", "frelu", {"window": 3, "norm": "in"}),
        Variant("GN", "GN", "frelu", {"window": 3, "norm": "gn", "groups": 4}),
    ),
}


def added_params(v: Variant, suite: str = "") -> int:
    """Parameters the variant adds over the ReLU toy model."""
    return count_params(v.spec(suite)) - count_params(toy_cnn("relu"))


@dataclass
class Run:
    suite: str
    model: str
    label: str
    seed: int
    accuracy: float
    added_params: int


@dataclass
class SummaryRow:
    model: str
    label: str
    added_params: int
    n: int
    mean: float
    sd: float


def run_suite(suite: str, seeds: int, cfg: Optional[TrainConfig] = None, data=None,
              progress: Optional[Callable[[Run], None]] = None) -> list[Run]:
    """Train every variant of ``suite`` for seeds ``cfg.seed .. cfg.seed + seeds - 1``."""
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; expected one of {', '.join(SUITES)}")
    if seeds < 1:
        raise ConfigError("seeds must be >= 1")
    cfg = cfg or TrainConfig()
    data = data or load_datasets(cfg)
    runs = []
    for v in SUITES[suite]:
        extra = added_params(v, suite)
        spec = v.spec(suite)
        for s in range(cfg.seed, cfg.seed + seeds):
            res = train(replace(cfg, seed=s, model=spec.name), model=spec, data=data)
            run = Run(suite, v.model, v.label, s, res.test_accuracy, extra)
            runs.append(run)
            if progress:
                progress(run)
    return runs


def summarize(runs: list[Run]) -> list[SummaryRow]:
    order: dict[tuple[str, str], list[Run]] = {}
    for r in runs:
        order.setdefault((r.model, r.label), []).append(r)
    rows = []
    for (model, label), rs in order.items():
        accs = [r.accuracy for r in rs]
        sd = statistics.stdev(accs) if len(accs) > 1 else 0.0
        rows.append(SummaryRow(model, label, rs[0].added_params, len(accs), statistics.fmean(accs), sd))
    return rows


def runs_csv(runs: list[Run]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["suite", "model", "variant", "seed", "accuracy", "added_params"])
    for r in runs:
        w.writerow([r.suite, r.model, r.label, r.seed, repr(r.accuracy), r.added_params])
    return buf.getvalue()


def summary_csv(rows: list[SummaryRow]) -> str:
    """One row per variant; ``accuracy`` is ``mean±sd`` in percent."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "variant", "added_params", "seeds", "mean", "sd", "accuracy"])
    for r in rows:
        w.writerow([r.model, r.label, r.added_params, r.n, f"{r.mean:.6f}", f"{r.sd:.6f}",
                    f"{100 * r.mean:.2f}±{100 * r.sd:.2f}"])
    return buf.getvalue()
