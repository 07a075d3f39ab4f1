import csv
import io
import shutil
import subprocess
import sys

import numpy as np
import pytest

from funnel import checkpoint as ckpt
from funnel.cli import main
from funnel.data import load_idx_dir, synth_layouts

TINY_CFG = "model=toy-cnn-frelu\nn_train=64\nn_test=40\niterations=4\neval_every=2\nbatch_size=8\n"


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_gradcheck_pass_and_usage(capsys):
    code, out, _ = run(capsys, "gradcheck", "--op", "frelu", "--window", "3", "--norm", "bn")
    assert code == 0 and "passed=PASS" in out
    err = float(next(l for l in out.splitlines() if l.startswith("max_rel_error=")).split("=")[1])
    assert err <= 1e-5
    assert out.splitlines()[:2] == ["norm=bn", "op=frelu"]
    assert run(capsys, "gradcheck", "--op", "relu")[0] == 0
    assert run(capsys, "gradcheck", "--op", "nosuch")[0] == 2
    assert run(capsys, "gradcheck", "--op", "relu", "--bogus")[0] == 2
    assert run(capsys, "gradcheck", "--op", "frelu", "--window", "2")[0] == 2


def test_count_output(capsys):
    code, out, _ = run(capsys, "count", "--model", "resnet50-relu", "--input", "3x224x224")
    assert code == 0 and "params=25.5M flops=3.86G" in out.splitlines()
    assert "flops=3.87G" in run(capsys, "count", "--model", "resnet50-frelu", "--input", "3x224x224")[1]
    assert "params=44.4M flops=7.6G" in run(capsys, "count", "--model", "resnet101-relu",
                                             "--input", "3x224x224")[1]
    assert run(capsys, "count", "--model", "nosuch")[0] == 2
    assert run(capsys, "count", "--model", "toy-cnn-relu", "--input", "1x32")[0] == 2


def test_count_csv_and_bad_file(capsys, tmp_path):
    code, out, _ = run(capsys, "count", "--model", "toy-cnn-frelu", "--csv")
    assert code == 0 and "name,kind,out_shape,params,norm_params,flops,other_ops" in out
    bad = tmp_path / "bad.model"
    bad.write_text("input 1x8x8\nc1 conv cin=3 cout=4 k=3\n")
    code, _, err = run(capsys, "count", "--model", str(bad))
    assert code == 2 and "c1" in err


def test_afield(capsys):
    code, out, _ = run(capsys, "afield", "--layers", "3", "--k", "3")
    assert code == 0 and out.splitlines()[-1] == "1,3,5,7"
    assert run(capsys, "afield", "--layers", "3", "--k", "4")[0] == 2


def test_rfield(capsys):
    code, out, _ = run(capsys, "rfield", "--layers", "2", "--draws", "2")
    assert code == 0 and "extent=5x5 bound=5x5" in out
    a = run(capsys, "rfield", "--layers", "2", "--seed", "3", "--no-witness")[1]
    assert a == run(capsys, "rfield", "--layers", "2", "--seed", "3", "--no-witness")[1]


def test_export_synth_roundtrip(capsys, tmp_path):
    code, _, _ = run(capsys, "export-synth", "--n", "2000", "--out", str(tmp_path / "data"))
    assert code == 0
    back = load_idx_dir(tmp_path / "data", "train")
    ref = synth_layouts(2000, seed=1234)
    assert back.images.tobytes() == ref.images.tobytes()
    assert np.array_equal(back.labels, ref.labels)


def test_train_eval_and_resume(capsys, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "a"))
    assert code == 0 and out.startswith("model=toy-cnn-frelu\n") and "seed=1\n" in out
    hist = (tmp_path / "a" / "history.csv").read_text()
    assert hist.splitlines()[0] == "iter,loss,acc" and len(hist.splitlines()) == 3
    code, out, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "a" / "checkpoint.fnkc"))
    assert code == 0 and "test_accuracy=" in out
    # determinism under --seed
    run(capsys, "train", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "b"))
    assert (tmp_path / "b" / "checkpoint.fnkc").read_bytes() == (tmp_path / "a" / "checkpoint.fnkc").read_bytes()
    # a printed config is itself a runnable config
    printed = tmp_path / "printed.cfg"
    printed.write_text(out_config(tmp_path / "a" / "checkpoint.fnkc"))
    run(capsys, "train", "--config", str(printed), "--out", str(tmp_path / "c"))
    assert (tmp_path / "c" / "checkpoint.fnkc").read_bytes() == (tmp_path / "a" / "checkpoint.fnkc").read_bytes()


def out_config(path):
    return ckpt.load(path).config_text


def test_train_usage_errors(capsys, tmp_path):
    assert run(capsys, "train", "--config", str(tmp_path / "missing.cfg"))[0] == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("nosuch=1\n")
    assert run(capsys, "train", "--config", str(bad))[0] == 2
    assert run(capsys, "train", "--lr", "-1", "--out", str(tmp_path / "x"))[0] == 2


def test_ablate_condition(capsys, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG.replace("iterations=4", "iterations=2"))
    runs = tmp_path / "runs.csv"
    code, out, _ = run(capsys, "ablate", "--suite", "condition", "--seeds", "2", "--config", str(cfg),
                       "--runs", str(runs))
    assert code == 0
    body = out[out.index("model,variant"):]
    rows = list(csv.DictReader(io.StringIO(body)))
    assert [r["model"] for r in rows] == list("ABCDE")
    assert [r["variant"] for r in rows][1:3] == ["Max(x, MaxPool(x))", "Max(x, AvgPool(x))"]
    assert [r["added_params"] for r in rows][1:3] == ["0", "0"]
    assert len(list(csv.DictReader(io.StringIO(runs.read_text())))) == 10
    assert run(capsys, "ablate", "--suite", "nosuch")[0] == 2


@pytest.mark.skipif(shutil.which("funnel") is None, reason="console script not installed")
def test_console_script_exit_codes():
    assert subprocess.run(["funnel", "afield", "--layers", "1"], capture_output=True).returncode == 0
    r = subprocess.run(["funnel", "gradcheck", "--op", "nosuch"], capture_output=True)
    assert r.returncode == 2
    r = subprocess.run([sys.executable, "-m", "funnel", "afield", "--layers", "2"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.splitlines()[-1] == "1,3,5"
