"""Acceptance criteria 1-7.

Each test records a one-line PASS/FAIL verdict that is printed as it runs and
again in the pytest terminal summary.  Run alone with::

    pytest tests/test_acceptance.py -s
"""

import csv
import io
import statistics
import time

import numpy as np
import pytest

from acceptance_log import record
from funnel import activations as A
from funnel import analysis as an
from funnel import checkpoint as ckpt
from funnel import complexity as cx
from funnel import data
from funnel import gradcheck as gc
from funnel.ablation import SUITES
from funnel.cli import main
from funnel.tensor import make_rng
from funnel.trainer import TrainConfig, load_datasets, train

SHAPES = [(2, 2, 5, 5), (2, 3, 5, 6), (3, 4, 4, 4)]
SEEDS = 5


def test_criterion_1_complexity():
    t0 = time.perf_counter()
    got = {}
    for name in ("resnet50-relu", "resnet50-frelu", "resnet101-relu"):
        c = cx.count(cx.resolve_model(name), (3, 224, 224))
        got[name] = (c.params, c.flops)
    elapsed = time.perf_counter() - t0
    want = {"resnet50-relu": (25.5, 3.86), "resnet50-frelu": (25.5, 3.87), "resnet101-relu": (44.4, 7.6)}
    ok = elapsed < 1.0
    parts = []
    for name, (p, f) in got.items():
        wp, wf = want[name]
        ftol = 0.005 if name.startswith("resnet50") else 0.05
        ok &= abs(p / 1e6 - wp) <= 0.05 and abs(f / 1e9 - wf) <= ftol
        parts.append(f"{name} {cx.fmt_params(p)}/{cx.fmt_flops(f)}")
    record(1, ok, "; ".join(parts) + f" ({elapsed:.2f}s)")
    assert ok


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    worst, failed = 0.0, []
    for name in gc.CASE_NAMES:
        for shape in SHAPES:
            for seed in range(2):
                rep = gc.make_case(name, shape, seed=seed).run(tol=1e-5)
                worst = max(worst, rep.max_rel_error)
                if not rep.passed:
                    failed.append(f"{name}{shape}")
    for window in (1, 3, 5, A.PAIR):
        for norm in ("bn", "ln", "in", "gn", "none"):
            rep = gc.make_case("frelu", (2, 2, 5, 5), window=window, norm=norm).run(tol=1e-5)
            worst = max(worst, rep.max_rel_error)
            if not rep.passed:
                failed.append(f"frelu[{window},{norm}]")
    elapsed = time.perf_counter() - t0
    ok = not failed and worst <= 1e-5 and elapsed < 120
    record(2, ok, f"{len(gc.CASE_NAMES)} ops x {len(SHAPES)} shapes, max_rel_error={worst:.2e}, "
                  f"failed={failed or 'none'} ({elapsed:.1f}s)")
    assert ok


def test_criterion_3_degeneracy():
    t0 = time.perf_counter()
    rng = make_rng(3)
    x = rng.standard_normal((4, 5, 25, 20))
    none = A.FunnelConfig(window=3, norm="none")
    relu_ok = A.frelu_forward(x, none, {"weight": np.zeros((1, 5, 3, 3))})[0].tobytes() == \
        A.relu_forward(x).tobytes()
    p = rng.uniform(-1, 1, 5)
    one = A.FunnelConfig(window=1, norm="none")
    out, cache = A.frelu_forward(x, one, {"weight": p.reshape(1, 5, 1, 1)})
    prelu_ok = out.tobytes() == A.prelu_forward(x, p).tobytes()
    g = rng.standard_normal(x.shape)
    gx, grads = A.frelu_backward(cache, g)
    gx_ref, gp_ref = A.prelu_backward(x, p, g)
    prelu_ok &= gx.tobytes() == gx_ref.tobytes() and grads["weight"].ravel().tobytes() == gp_ref.tobytes()
    elapsed = time.perf_counter() - t0
    ok = relu_ok and prelu_ok and elapsed < 10
    record(3, ok, f"zero-window==ReLU: {relu_ok}; 1x1==PReLU: {prelu_ok} on {x.size} values ({elapsed:.2f}s)")
    assert ok


def test_criterion_4_activate_field():
    t0 = time.perf_counter()
    symbolic = all(sorted(an.activate_field(n, k).sizes) == sorted({1 + i * (k - 1) for i in range(n + 1)})
                   for n in range(1, 11) for k in (1, 3, 5, 7))
    rng = make_rng(4)
    worst_excess = -99
    for _ in range(100):
        n = int(rng.integers(1, 6))
        m = an.empirical_receptive_field(an.FunnelStack(n, init_std=float(rng.uniform(0.1, 2.0))),
                                         rng=rng, draws=1, witness=False)
        worst_excess = max(worst_excess, max(m.extent) - (1 + 2 * n))
    achieved = all(an.empirical_receptive_field(an.FunnelStack(n), draws=1).extent == (1 + 2 * n,) * 2
                   for n in range(1, 6))
    elapsed = time.perf_counter() - t0
    ok = symbolic and worst_excess <= 0 and achieved and elapsed < 60
    record(4, ok, f"symbolic law n<=10: {symbolic}; 100 trials max(extent-bound)={worst_excess}; "
                  f"bound achieved n=1..5: {achieved} ({elapsed:.1f}s)")
    assert ok


def test_criterion_5_training_advantage():
    t0 = time.perf_counter()
    cfg = TrainConfig()
    ds = load_datasets(cfg)
    one = next(v for v in SUITES["window"] if v.label == "1×1")
    models = {"relu": cx.resolve_model("toy-cnn-relu"), "prelu": cx.resolve_model("toy-cnn-prelu"),
              "frelu": cx.resolve_model("toy-cnn-frelu"), "frelu-1x1": one.spec("window")}
    acc = {k: [] for k in models}
    for name, spec in models.items():
        for seed in range(SEEDS):
            res = train(TrainConfig(seed=seed, model=spec.name), model=spec, data=ds)
            acc[name].append(res.test_accuracy)
            print(f"  {name} seed={seed} acc={res.test_accuracy:.4f}", flush=True)
    mean = {k: statistics.fmean(v) for k, v in acc.items()}
    elapsed = time.perf_counter() - t0
    gap = 100 * (mean["frelu"] - mean["relu"])
    ok = gap >= 2.0 and mean["frelu"] >= mean["prelu"] and mean["frelu"] > mean["frelu-1x1"] \
        and elapsed < 1800
    record(5, ok, " ".join(f"{k}={100 * v:.2f}" for k, v in mean.items())
           + f" frelu-relu={gap:+.2f}pt over {SEEDS} seeds, {cfg.iterations} it ({elapsed / 60:.1f} min)")
    assert ok


def test_criterion_6_ablation_harness(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("n_train=64\nn_test=40\niterations=2\neval_every=2\nbatch_size=8\n")
    code = main(["ablate", "--suite", "condition", "--seeds", "1", "--config", str(cfg)])
    out = capsys.readouterr().out
    rows = list(csv.DictReader(io.StringIO(out[out.index("model,variant"):])))
    want = [("A", "Max(x, ParamPool(x))"), ("B", "Max(x, MaxPool(x))"), ("C", "Max(x, AvgPool(x))"),
            ("D", "Sum(x, ParamPool(x))"), ("E", "Max(DW(x), 0)")]
    labels_ok = [(r["model"], r["variant"]) for r in rows] == want
    zero_ok = [r["added_params"] for r in rows][1:3] == ["0", "0"]
    parsed_ok = all(0.0 <= float(r["mean"]) <= 1.0 for r in rows)
    counted = {v.model: cx.count_params(v.spec("condition")) - cx.count_params(cx.toy_cnn("relu"))
               for v in SUITES["condition"]}
    ok = code == 0 and labels_ok and zero_ok and parsed_ok and counted["B"] == counted["C"] == 0
    record(6, ok, f"rows={[r['model'] for r in rows]} added_params="
                  f"{[int(r['added_params']) for r in rows]}")
    assert ok


def test_criterion_7_determinism_and_persistence(tmp_path):
    rng = make_rng(7)
    ds = (data.synth_layouts(256, rng=rng), data.synth_layouts(100, rng=rng, split="test"))
    cfg = TrainConfig(iterations=20, eval_every=5, batch_size=16)
    a, b = train(cfg, data=ds), train(cfg, data=ds)
    same_history = a.history == b.history and ckpt.to_bytes(a.checkpoint) == ckpt.to_bytes(b.checkpoint)
    path = tmp_path / "mid.fnkc"
    train(cfg, data=ds, checkpoint_path=path, stop_at=10)
    resumed = train(cfg, data=ds, resume=ckpt.load(path))
    resume_ok = ckpt.to_bytes(resumed.checkpoint) == ckpt.to_bytes(a.checkpoint)
    saved = path.read_bytes()
    resave_ok = ckpt.to_bytes(ckpt.load(path)) == saved
    synth = data.synth_layouts(500, seed=1234)
    data.export_idx(synth, tmp_path / "idx")
    back = data.load_idx_dir(tmp_path / "idx", "train")
    idx_ok = back.images.tobytes() == synth.images.tobytes() and np.array_equal(back.labels, synth.labels)
    ok = same_history and resume_ok and resave_ok and idx_ok
    record(7, ok, f"history bitwise: {same_history}; resume bitwise: {resume_ok}; "
                  f"save-load-save: {resave_ok}; IDX round trip: {idx_ok}")
    assert ok
