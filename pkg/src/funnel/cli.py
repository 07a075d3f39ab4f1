"""Command-line entry point: ``funnel <subcommand> [flags]``.

Every subcommand first prints its resolved configuration as ``key=value``
lines, then acts.  Exit codes: 0 success, 1 failed check or runtime failure,
2 usage error (bad flags, unknown names, unreadable config).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, FormatError, FunnelError, ValidationError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _print_config(**items) -> None:
    for k in sorted(items):
        v = items[k]
        if v is not None:
            print(f"{k}={v}")


def _window(text: str):
    from .activations import PAIR
    if text == PAIR:
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be an odd integer or {PAIR!r}") from None


# -- subcommands -------------------------------------------------------------------

def cmd_gradcheck(a) -> int:
    from . import gradcheck as gc
    shape = tuple(int(v) for v in a.shape.lower().split("x"))
    if len(shape) != 4:
        raise UsageError(f"--shape must be NxCxHxW, got {a.shape!r}")
    _print_config(op=a.op, window=a.window, norm=a.norm, seed=a.seed, shape=a.shape, tol=a.tol)
    report = gc.make_case(a.op, shape, a.window, a.norm, a.seed).run(tol=a.tol)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_count(a) -> int:
    from . import complexity as cx
    model = cx.resolve_model(a.model)
    shape = cx.parse_shape(a.input) if a.input else model.input_shape
    if shape is None:
        raise UsageError("model declares no input shape; pass --input CxHxW")
    _print_config(model=model.name, input="x".join(map(str, shape)))
    c = cx.count(model, shape)
    print(f"params={cx.fmt_params(c.params)} flops={cx.fmt_flops(c.flops)}")
    print(f"params_raw={c.params} flops_raw={c.flops} norm_params={c.norm_params} "
          f"total_params={c.total_params}")
    if a.csv:
        sys.stdout.write(cx.breakdown_csv(c))
    return EXIT_OK


def _train_config(a):
    from .trainer import TrainConfig
    overrides = dict(seed=a.seed, model=a.model, dataset=a.dataset, iterations=a.iterations,
                     lr=a.lr, batch_size=a.batch_size, eval_every=a.eval_every)
    if a.config:
        path = Path(a.config)
        if not path.is_file() and not path.parent.name:
            path = Path("configs") / path.name
        if not path.is_file():
            raise UsageError(f"config file {a.config!r} not found")
        return TrainConfig.load(path, **overrides)
    return TrainConfig.from_text("", **overrides)


def cmd_train(a) -> int:
    from . import checkpoint as ckpt
    from .trainer import TrainingDiverged, train
    cfg = _train_config(a)
    sys.stdout.write(cfg.to_text())
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = ckpt.load(a.resume) if a.resume else None
    try:
        res = train(cfg, resume=resume, checkpoint_path=out / "checkpoint.fnkc")
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    (out / "history.csv").write_text(res.history_csv())
    print(f"history={out / 'history.csv'}")
    print(f"checkpoint={out / 'checkpoint.fnkc'}")
    print(f"initial_loss={res.initial_loss:.6f} final_loss={res.final_loss:.6f}")
    print(f"test_accuracy={res.test_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from . import checkpoint as ckpt
    from .trainer import TrainConfig, evaluate_checkpoint, load_datasets
    ck = ckpt.load(a.checkpoint)
    cfg = TrainConfig.from_text(ck.config_text, dataset=a.dataset)
    _print_config(checkpoint=a.checkpoint, model=ck.model_name, iteration=ck.iteration,
                  dataset=cfg.dataset, data_seed=cfg.data_seed)
    _, test = load_datasets(cfg)
    acc, per_class = evaluate_checkpoint(ck, test)
    print(f"test_accuracy={acc:.4f}")
    print("per_class=" + ",".join(f"{v:.4f}" for v in per_class))
    return EXIT_OK


def cmd_ablate(a) -> int:
    from . import ablation as ab
    cfg = _train_config(a)
    print(f"suite={a.suite}")
    print(f"seeds={a.seeds}")
    sys.stdout.write(cfg.to_text())

    def progress(run):
        print(f"# {run.model} {run.label} seed={run.seed} acc={run.accuracy:.4f}", file=sys.stderr)

    runs = ab.run_suite(a.suite, a.seeds, cfg, progress=progress)
    if a.runs:
        Path(a.runs).write_text(ab.runs_csv(runs), encoding="utf-8")
    text = ab.summary_csv(ab.summarize(runs))
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_afield(a) -> int:
    from .analysis import activate_field
    _print_config(layers=a.layers, k=a.k)
    print(",".join(map(str, activate_field(a.layers, a.k).sizes)))
    return EXIT_OK


def cmd_rfield(a) -> int:
    from .analysis import FunnelStack, empirical_receptive_field
    from .tensor import make_rng
    _print_config(layers=a.layers, k=a.k, seed=a.seed, draws=a.draws, witness=int(not a.no_witness))
    stack = FunnelStack(a.layers, a.k, channels=1)
    m = empirical_receptive_field(stack, rng=make_rng(a.seed), draws=a.draws, witness=not a.no_witness)
    h, w = m.extent
    print(f"extent={h}x{w} bound={stack.bound()}x{stack.bound()}")
    sys.stdout.write(m.to_csv())
    return EXIT_OK


def cmd_export_synth(a) -> int:
    from .data import export_idx, synth_layouts
    _print_config(n=a.n, out=a.out, seed=a.seed, split=a.split, image_size=a.image_size)
    ds = synth_layouts(a.n, a.image_size, seed=a.seed, split=a.split)
    img, lab = export_idx(ds, a.out)
    print(f"images={img}")
    print(f"labels={lab}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _train_flags(p, with_out=True):
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--model", help="builtin model name or model file")
    p.add_argument("--dataset", help="'synth' or a directory of IDX files")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-every", type=int)
    if with_out:
        p.add_argument("--out", default="run", help="output directory (default: run)")


def build_parser() -> argparse.ArgumentParser:
    from .gradcheck import CASE_NAMES
    from .ablation import SUITES

    parser = argparse.ArgumentParser(prog="funnel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    p = sub.add_parser("gradcheck", help="finite-difference check of one op")
    p.add_argument("--op", required=True, choices=CASE_NAMES)
    p.add_argument("--window", type=_window, default=3)
    p.add_argument("--norm", default="bn", choices=("bn", "ln", "in", "gn", "none"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", default="2x2x5x5", help="NxCxHxW input shape")
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count", help="parameter and FLOP count of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", help="CxHxW input shape (default: the model's own)")
    p.add_argument("--csv", action="store_true", help="also print the per-layer breakdown")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("train", help="train a model; writes history.csv and checkpoint.fnkc")
    _train_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="override the dataset recorded in the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train an ablation suite; prints a mean±sd CSV")
    p.add_argument("--suite", required=True, choices=tuple(SUITES))
    p.add_argument("--seeds", type=int, default=1)
    _train_flags(p, with_out=False)
    p.add_argument("--out", help="also write the summary CSV here")
    p.add_argument("--runs", help="write one CSV row per (variant, seed) here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("afield", help="activate-field sizes after n funnel layers")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--k", type=int, default=3)
    p.set_defaults(func=cmd_afield)

    p = sub.add_parser("rfield", help="empirical receptive field of stacked funnel layers")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=8)
    p.add_argument("--no-witness", action="store_true", help="random draws only")
    p.set_defaults(func=cmd_rfield)

    p = sub.add_parser("export-synth", help="write a synthetic layout split as IDX files")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--split", default="train")
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=cmd_export_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return a.func(a)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE if a.command == "count" else EXIT_FAIL
    except FunnelError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
