import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from stcl import cli, diffcore as dc, gradcheck
from stcl.synthvid import read_clip, read_pgm

SMALL = ["--set", "train_clips=3", "--set", "eval_clips=2", "--set", "batch_clips=2", "--set", "clip_T=4",
         "--set", "key_dim=4", "--set", "value_dim=4", "--set", "hidden1=4", "--set", "hidden2=4",
         "--set", "dec_hidden=4", "--set", "eval_with_corr=0", "--set", "distractors_per_frame=2"]


def run(*argv):
    return cli.main(list(argv))


def test_usage_errors(tmp_path, capsys):
    assert run() == 2
    assert run("frobnicate") == 2
    assert run("train", "--set", "nonsense=1", "--out", str(tmp_path)) == 2
    assert run("train", "--set", "novalue", "--out", str(tmp_path)) == 2
    assert run("train", "--config", str(tmp_path / "missing.cfg")) == 2
    assert run("gradcheck", "--losses", "nope") == 2


def test_config_and_io_errors(tmp_path, capsys):
    assert run("train", "--set", "lr=fast", "--out", str(tmp_path)) == 3
    assert run("train", "--set", "pcl_negative_mode=sideways", "--out", str(tmp_path)) == 3
    assert run("eval", "--checkpoint", str(tmp_path / "none.stcl"), "--out", str(tmp_path)) == 5
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("gen-data", *SMALL, "--out", str(blocker / "sub")) == 5


def test_thread_cap():
    env = {"STCL_THREADS": "2"}
    assert cli.apply_thread_cap(env) == 2 and env["OMP_NUM_THREADS"] == "2"
    assert cli.apply_thread_cap({}) is None
    from stcl.errors import ConfigError
    with pytest.raises(ConfigError):
        cli.apply_thread_cap({"STCL_THREADS": "0"})


def test_bad_thread_cap_exits_with_config_code(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("STCL_THREADS", "many")
    assert run("gen-data", *SMALL, "--out", str(tmp_path)) == 3


def test_gen_data_counts_and_reproducibility(tmp_path, capsys):
    assert run("gen-data", *SMALL, "--out", str(tmp_path / "a")) == 0
    assert run("gen-data", *SMALL, "--out", str(tmp_path / "b")) == 0
    train = (tmp_path / "a" / "train" / "manifest.txt").read_text().split()
    evals = (tmp_path / "a" / "eval" / "manifest.txt").read_text().split()
    assert len(train) == 3 and len(evals) == 2 and not set(train) & set(evals)
    for name in train:
        for f in (tmp_path / "a" / "train" / name).iterdir():
            assert f.read_bytes() == (tmp_path / "b" / "train" / name / f.name).read_bytes()
    assert run("gen-data", *SMALL, "--set", "train_clips=0", "--out", str(tmp_path / "c")) == 0
    assert (tmp_path / "c" / "train" / "manifest.txt").read_text() == ""


def test_default_gen_data_counts(tmp_path, capsys):
    assert run("gen-data", "--set", "distractors_per_frame=0", "--out", str(tmp_path)) == 0
    assert len((tmp_path / "train" / "manifest.txt").read_text().split()) == 64
    assert len((tmp_path / "eval" / "manifest.txt").read_text().split()) == 16


def test_train_resume_eval_and_infer(tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", *SMALL, "--set", "total_steps=2", "--set", "alpha_max=0", "--out", str(out)) == 0
    ckpt = out / "ckpt_000002.stcl"
    assert ckpt.is_file()
    assert run("train", *SMALL, "--set", "total_steps=3", "--out", str(out), "--resume", str(ckpt)) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["step"] for r in rows] == ["0", "1", "2"]
    assert run("train", *SMALL, "--set", "total_steps=3", "--out", str(out), "--resume", str(tmp_path / "x")) == 5

    assert run("eval", *SMALL, "--checkpoint", str(out / "ckpt_000003.stcl"), "--out", str(out)) == 0
    assert (out / "eval.csv").read_text().splitlines()[-1].startswith("mean,")

    assert run("gen-data", *SMALL, "--out", str(tmp_path / "data")) == 0
    clip_dir = tmp_path / "data" / "eval" / (tmp_path / "data" / "eval" / "manifest.txt").read_text().split()[0]
    pred_dir = tmp_path / "pred"
    assert run("infer", *SMALL, "--checkpoint", str(ckpt), "--clip", str(clip_dir), "--out", str(pred_dir)) == 0
    T = read_clip(clip_dir).T
    preds = sorted(pred_dir.glob("pred_*.pgm"))
    assert len(preds) == T - 1 and read_pgm(preds[0]).shape == (64, 64)
    assert run("infer", *SMALL, "--checkpoint", str(tmp_path / "gone.stcl"), "--clip", str(clip_dir)) == 5


def test_ablate_shares_seeds(tmp_path, capsys):
    argv = ["ablate", *SMALL, "--set", "total_steps=2", "--set", "eval_clips=1", "--seeds", "0,1",
            "--out", str(tmp_path)]
    assert run(*argv) == 0
    rows = {}
    for variant in ("base", "pcl", "ocl", "full"):
        rows[variant] = list(csv.DictReader(open(tmp_path / f"{variant}.csv")))
        assert [r["seed"] for r in rows[variant]] == ["0", "1"]
    for i in range(2):
        assert len({rows[v][i]["l_seg_step0"] for v in rows}) == 1
    summary = list(csv.reader(open(tmp_path / "summary.csv")))
    assert [r[0] for r in summary[1:]] == ["base", "pcl", "ocl", "full"]
    assert run("ablate", *SMALL, "--seeds", "a,b", "--out", str(tmp_path)) == 2


def test_gradcheck_passes(capsys):
    assert run("gradcheck", "--seeds", "2") == 0
    out = capsys.readouterr().out
    assert all(name in out for name in ("seg", "pcl", "ocl", "total")) and "max_rel_err" in out


def _flip_backward(t: dc.Tensor) -> dc.Tensor:
    return dc._make("sign_bug", t.data.copy(), (t,), lambda g: (-g,))


def test_gradcheck_catches_sign_bug_in_pixel_loss_backward(monkeypatch, capsys):
    real = gradcheck.pcl_loss
    monkeypatch.setattr(gradcheck, "pcl_loss", lambda *a, **k: _flip_backward(real(*a, **k)))
    assert run("gradcheck", "--seeds", "2", "--losses", "pcl") == 4
    assert "FAIL" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    env = dict(os.environ, STCL_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "stcl", "gradcheck", "--seeds", "1", "--losses", "pcl"],
                          capture_output=True, text=True, env=env, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert "PASS" in proc.stdout
