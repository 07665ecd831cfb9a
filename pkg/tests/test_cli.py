import json
import subprocess
import sys

import numpy as np
import pytest

from mrmf.checkpoint import load_checkpoint, save_checkpoint
from mrmf.cli import build_parser, main
from mrmf.data import Dataset, read_dataset, write_dataset
from mrmf.nn import build_model
from mrmf.training import read_metrics_csv

SMALL = """
seed = 2
timing = "modeled"
[task]
extents = [16]
channels = 2
label_length = 3
samples = 60
[model]
layers = [{kind = "conv", kernel = 3, out_channels = 3}, {kind = "tanh"}, {kind = "flatten"},
          {kind = "fc", out_features = 8}, {kind = "tanh"}, {kind = "fc", out_features = 3}]
[optimizer]
kind = "adam"
lr = 0.01
[finetune]
epsilon = 1e-9
patience = 10
max_epochs = 3
batch_size = 8
"""
STAGE = """
[[stage]]
coarse_factors = [{c}]
dense_factors = [{d}]
coarse = {{epsilon = 1e-9, patience = 10, max_epochs = 2}}
dense = {{epsilon = 1e-9, patience = 10, max_epochs = 1}}
"""


def _cfg(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _two_fusion(tmp_path):
    return _cfg(tmp_path, SMALL + STAGE.format(c=4, d=2) + STAGE.format(c=2, d=1), "two.cfg")


# ------------------------------------------------------------------ gen-data / downsample

def test_gen_data_shapes_and_determinism(tmp_path, capsys):
    cfg = _cfg(tmp_path, SMALL)
    a, b, c = (str(tmp_path / n) for n in ("a.mrd", "b.mrd", "c.mrd"))
    assert main(["gen-data", cfg, "--out", a]) == 0
    assert main(["gen-data", cfg, "--out", b]) == 0
    assert main(["gen-data", cfg, "--out", c, "--seed", "9"]) == 0
    data = read_dataset(a)
    assert len(data) == 60 and data.sample_shape == (16, 2) and data.label_length == 3
    assert open(a, "rb").read() == open(b, "rb").read()
    assert open(a, "rb").read() != open(c, "rb").read()
    assert "N=60" in capsys.readouterr().out


def test_gen_data_bad_config_writes_nothing(tmp_path):
    cfg = _cfg(tmp_path, SMALL + "mystery = 1\n")
    out = tmp_path / "x.mrd"
    assert main(["gen-data", cfg, "--out", str(out)]) == 3
    assert not out.exists()


def test_downsample_volume(tmp_path):
    data = Dataset(np.random.default_rng(0).standard_normal((2, 8, 8, 8, 1)), np.ones((2, 4)))
    src, dst = tmp_path / "v.mrd", tmp_path / "v2.mrd"
    write_dataset(data, src)
    assert main(["downsample", str(src), "--factors", "2,2,2", "--out", str(dst)]) == 0
    out = read_dataset(str(dst))
    assert out.sample_shape == (4, 4, 4, 1)
    assert np.array_equal(out.labels, read_dataset(str(src)).labels)


def test_downsample_factor_one_keeps_payload(tmp_path):
    data = Dataset(np.random.default_rng(1).standard_normal((3, 8, 2)), np.ones((3, 2)))
    src, dst = tmp_path / "a.mrd", tmp_path / "b.mrd"
    write_dataset(data, src)
    assert main(["downsample", str(src), "--factors", "1", "--out", str(dst)]) == 0
    assert src.read_bytes() == dst.read_bytes()


def test_downsample_errors(tmp_path, capsys):
    data = Dataset(np.zeros((1, 1600, 3)), np.zeros((1, 19)))
    src = tmp_path / "n.mrd"
    write_dataset(data, src)
    assert main(["downsample", str(src), "--factors", "3", "--out", str(tmp_path / "o.mrd")]) == 4
    assert "axis 0" in capsys.readouterr().err
    assert main(["downsample", str(src), "--factors", "2,2", "--out", str(tmp_path / "o.mrd")]) == 4
    assert main(["downsample", str(tmp_path / "none.mrd"), "--factors", "2", "--out", str(tmp_path / "o.mrd")]) == 7
    (tmp_path / "junk.mrd").write_bytes(b"JUNKJUNK")
    assert main(["downsample", str(tmp_path / "junk.mrd"), "--factors", "2", "--out", str(tmp_path / "o.mrd")]) == 8


# ------------------------------------------------------------------ train

def test_train_two_fusions_summary(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", _two_fusion(tmp_path), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [s["section"] for s in summary["sections"]] == ["stage 0", "stage 1", "finetune"]
    assert summary["coarse_epochs"] == 4 and summary["dense_pre_epochs"] == 2
    assert summary["finetune_epochs"] == 3 and summary["original_resolution_epochs"] == 4
    records = read_metrics_csv(out / "metrics.csv")
    assert summary["coarse_epochs"] == sum(r.phase == "coarse" for r in records)
    assert summary["dense_pre_epochs"] == sum(r.phase == "dense" for r in records)
    assert summary["finetune_epochs"] == sum(r.phase == "finetune" for r in records)
    assert summary["total_seconds"] == pytest.approx(sum(r.epoch_seconds for r in records), rel=1e-12)
    assert (out / "final.mrc").exists() and (out / "stage0_fused.mrc").exists()
    assert "finetune: epochs=3" in capsys.readouterr().out


def test_train_empty_schedule_equals_baseline(tmp_path):
    cfg = _cfg(tmp_path, SMALL)
    assert main(["train", cfg, "--mode", "baseline", "--out", str(tmp_path / "b")]) == 0
    assert main(["train", cfg, "--mode", "mrmf", "--out", str(tmp_path / "m")]) == 0
    assert (tmp_path / "b" / "metrics.csv").read_bytes() == (tmp_path / "m" / "metrics.csv").read_bytes()
    assert (tmp_path / "b" / "final.mrc").read_bytes() == (tmp_path / "m" / "final.mrc").read_bytes()


def test_train_baseline_ignores_stages(tmp_path):
    out = tmp_path / "b"
    assert main(["train", _two_fusion(tmp_path), "--mode", "baseline", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["coarse_epochs"] == 0 and summary["finetune_epochs"] == 3
    assert [s["section"] for s in summary["sections"]] == ["finetune"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_abort_writes_diagnostic(tmp_path, capsys):
    cfg = _cfg(tmp_path, SMALL.replace('kind = "adam"\nlr = 0.01', 'kind = "sgd"\nlr = 1e200'))
    out = tmp_path / "bad"
    assert main(["train", cfg, "--out", str(out)]) == 5
    record = json.loads((out / "abort.json").read_text())
    assert record["diagnostic"]["phase"] == "finetune"
    assert "abort.json" in capsys.readouterr().err
    assert not (out / "final.mrc").exists()


def test_train_needs_output_dir(tmp_path):
    assert main(["train", _cfg(tmp_path, SMALL)]) == 3


# ------------------------------------------------------------------ fuse

def _ckpt(tmp_path, name, shape=(16, 2), seed=0, out=3):
    layers = [{"kind": "conv", "kernel": 3, "out_channels": 2}, {"kind": "flatten"},
              {"kind": "fc", "out_features": 4}, {"kind": "fc", "out_features": out}]
    path = tmp_path / name
    save_checkpoint(build_model(layers, shape, seed=seed), path)
    return str(path)


def test_fuse_self_is_bitwise(tmp_path, capsys):
    m = _ckpt(tmp_path, "m.mrc")
    out = tmp_path / "f.mrc"
    assert main(["fuse", m, m, "--out", str(out)]) == 0
    assert out.read_bytes() == (tmp_path / "m.mrc").read_bytes()
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "layer 0 conv: coarse+dense"


def test_fuse_provenance_output(tmp_path, capsys):
    c = _ckpt(tmp_path, "c.mrc", (8, 2), seed=1)
    d = _ckpt(tmp_path, "d.mrc", (16, 2), seed=2)
    assert main(["fuse", c, d, "--out", str(tmp_path / "f.mrc")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[:3] == ["layer 0 conv: coarse", "layer 2 fc: dense", "layer 3 fc: dense"]
    assert load_checkpoint(str(tmp_path / "f.mrc")).input_shape == (16, 2)


def test_fuse_error_codes(tmp_path):
    a = _ckpt(tmp_path, "a.mrc")
    b = _ckpt(tmp_path, "b.mrc", out=5)
    assert main(["fuse", a, b, "--out", str(tmp_path / "f.mrc")]) == 0  # head differs, still compatible
    layers = [{"kind": "conv", "kernel": 2, "out_channels": 2}, {"kind": "flatten"}, {"kind": "fc", "out_features": 4},
              {"kind": "fc", "out_features": 3}]
    save_checkpoint(build_model(layers, (16, 2), seed=0), tmp_path / "k.mrc")
    assert main(["fuse", a, str(tmp_path / "k.mrc"), "--out", str(tmp_path / "f.mrc")]) == 6
    assert main(["fuse", a, str(tmp_path / "missing.mrc"), "--out", str(tmp_path / "f.mrc")]) == 7


# ------------------------------------------------------------------ report

def test_report_outputs(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", _two_fusion(tmp_path), "--out", str(run)]) == 0
    capsys.readouterr()
    assert main(["report", str(run), "--out", str(tmp_path / "r1")]) == 0
    assert main(["report", str(run), "--out", str(tmp_path / "r2")]) == 0
    svg = (tmp_path / "r1_loss.svg").read_text()
    assert svg.count("<polyline") == 5
    assert svg == (tmp_path / "r2_loss.svg").read_text()
    rows = (tmp_path / "r1_phases.csv").read_text().splitlines()
    assert len(rows) == 6
    total = sum(float(r.split(",")[3]) for r in rows[1:])
    summary = json.loads((run / "summary.json").read_text())
    assert abs(total - summary["total_seconds"]) < 1e-6


def test_report_missing_dir(tmp_path):
    assert main(["report", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")]) != 0


# ------------------------------------------------------------------ help

def test_help_lists_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
            if action.help not in (None, "==SUPPRESS=="):
                assert action.help.split()[0] in text


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "mrmf.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert all(c in proc.stdout for c in ("gen-data", "downsample", "train", "fuse", "report"))


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_worker_granularity_flag(tmp_path):
    text = SMALL + STAGE.format(c=2, d=1) + "[parallel]\nconcurrent = true\ntotal_workers = 4\nt_dense = 3.0\nt_coarse = 1.0\n"
    cfg = _cfg(tmp_path, text)
    assert main(["train", cfg, "--out", str(tmp_path / "g1")]) == 0
    assert main(["train", cfg, "--out", str(tmp_path / "g2"), "--worker-granularity", "2"]) == 0
    alloc = [json.loads((tmp_path / d / "summary.json").read_text())["sections"][0]["allocation"] for d in ("g1", "g2")]
    assert alloc == [[3, 1], [2, 2]]
    assert main(["train", cfg, "--out", str(tmp_path / "g3"), "--worker-granularity", "3"]) == 3
