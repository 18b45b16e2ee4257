"""Command line behavior: exit codes, the workflow chain, reproducibility."""

import json
from pathlib import Path

import numpy as np
import pytest

from cxrkit.cli import cli_dispatch
from cxrkit.datakit import read_image_png, read_scores


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth -> train -> eval -> agree -> band chain, reused read-only."""
    root = tmp_path_factory.mktemp("cli")
    corpus, run = root / "corpus", root / "run"
    steps = [
        ["synth", "--out", str(corpus), "--size", "32", "--count", "80", "--seed", "0"],
        ["train", "--manifest", str(corpus / "manifest.csv"), "--out", str(run),
         "--epochs", "2", "--growth", "4", "--blocks", "1,1", "--seed", "0"],
        ["eval", "--manifest", str(corpus / "manifest.csv"),
         "--checkpoint", str(run / "model.ckpt"), "--out", str(run)],
        ["agree", "--annotations", str(corpus / "annotations.csv"), "--out", str(run)],
        ["band", "--scores", str(run / "scores.csv"),
         "--annotations", str(corpus / "annotations.csv"), "--out", str(run)],
    ]
    for argv in steps:
        assert cli_dispatch(argv) == 0, argv[0]
    return root


# ---------------------------------------------------------------- exit codes

@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["synth", "--bogus-flag"],
    ["synth", "--count", "zero"],
    ["synth", "--count", "-3"],
    ["train", "--manifest"],
    ["eval", "--manifest", "m.csv"],        # checkpoint missing
])
def test_usage_errors_exit_2(argv, capsys):
    assert cli_dispatch(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_out_dir_is_a_usage_error(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("CXRKIT_OUT", raising=False)
    assert cli_dispatch(["agree", "--annotations", "whatever.csv"]) == 2
    assert "CXRKIT_OUT" in capsys.readouterr().err


def test_data_errors_exit_1(tmp_path, capsys):
    rc = cli_dispatch(["agree", "--annotations", str(tmp_path / "nope.csv"),
                       "--out", str(tmp_path)])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("case_id,abnormality,score,label\nc0,x,0.5,7\n")
    rc = cli_dispatch(["band", "--scores", str(bad), "--out", str(tmp_path)])
    assert rc == 1


def test_help_exits_0(capsys):
    assert cli_dispatch(["--help"]) == 0
    assert "synth" in capsys.readouterr().out


def test_out_dir_from_environment(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("CXRKIT_OUT", str(tmp_path / "envout"))
    rc = cli_dispatch(["agree", "--annotations",
                       str(workspace / "corpus" / "annotations.csv")])
    assert rc == 0
    assert (tmp_path / "envout" / "agreement_report.csv").exists()


# ---------------------------------------------------------------- outputs

def test_synth_layout(workspace):
    corpus = workspace / "corpus"
    assert (corpus / "manifest.csv").exists()
    assert (corpus / "annotations.csv").exists()
    assert len(list((corpus / "images").glob("*.png"))) == 80
    assert (corpus / "masks").is_dir()
    config = json.loads((corpus / "config.json").read_text())
    assert config["command"] == "synth" and config["seed"] == 0


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "model.ckpt").stat().st_size > 0
    lines = (run / "train_report.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[:4] == ["epoch", "train_loss", "val_loss", "lr"]
    assert sum(1 for c in header if c.startswith("auc_")) == 7
    assert len(lines) == 3                          # header + 2 epochs


def test_eval_outputs(workspace):
    run = workspace / "run"
    tables = read_scores(run / "scores.csv")
    assert len(tables) == 7
    for table in tables.values():
        assert np.all((table.scores >= 0.0) & (table.scores <= 1.0))
    lines = (run / "eval_report.csv").read_text().splitlines()
    assert lines[0] == "abnormality,cases,auc"
    assert lines[-1].startswith("macro,80,")


def test_agree_output(workspace):
    lines = (workspace / "run" / "agreement_report.csv").read_text().splitlines()
    assert lines[0].startswith("panel,abnormality,cases,readers")
    assert len(lines) == 8                          # 4 A classes + 3 B classes
    panels = {line.split(",")[0] for line in lines[1:]}
    assert panels == {"panel_1", "panel_2"}


def test_band_output(workspace):
    run = workspace / "run"
    lines = (run / "band_report.csv").read_text().splitlines()
    assert lines[0] == "abnormality,category,before,after,retained_pct"
    categories = {line.split(",")[1] for line in lines[1:]}
    assert "total" in categories
    assert {"high_neg", "low_neg", "low_pos", "high_pos"} <= categories
    params = json.loads((run / "band_params.json").read_text())
    assert len(params) == 7
    for entry in params.values():
        assert set(entry) >= {"threshold", "rho_neg", "rho_pos"}


def test_normalize_writes_windowed_png(workspace, tmp_path):
    src = next((workspace / "corpus" / "images").glob("*.png"))
    dst = tmp_path / "win.png"
    assert cli_dispatch(["normalize", "--image", str(src),
                         "--out-image", str(dst)]) == 0
    img = read_image_png(dst)
    assert img.shape == (32, 32)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_sweep_emits_auc_vs_size_table(workspace, tmp_path):
    rc = cli_dispatch(["sweep", "--manifest",
                       str(workspace / "corpus" / "manifest.csv"),
                       "--out", str(tmp_path), "--fractions", "0.5,1.0",
                       "--seeds", "0", "--epochs", "2", "--growth", "4",
                       "--blocks", "1,1"])
    assert rc == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("seed,fraction,train_patients,macro_auc,auc_")
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[0] == "0" and first[1] == "0.5"
    assert int(lines[1].split(",")[2]) < int(lines[2].split(",")[2])


# ---------------------------------------------------------------- rerun

def test_rerun_is_byte_identical(workspace, tmp_path):
    corpus, run = tmp_path / "corpus", tmp_path / "run"
    steps = [
        ["synth", "--out", str(corpus), "--size", "32", "--count", "80", "--seed", "0"],
        ["train", "--manifest", str(corpus / "manifest.csv"), "--out", str(run),
         "--epochs", "2", "--growth", "4", "--blocks", "1,1", "--seed", "0"],
        ["eval", "--manifest", str(corpus / "manifest.csv"),
         "--checkpoint", str(run / "model.ckpt"), "--out", str(run)],
        ["agree", "--annotations", str(corpus / "annotations.csv"), "--out", str(run)],
        ["band", "--scores", str(run / "scores.csv"),
         "--annotations", str(corpus / "annotations.csv"), "--out", str(run)],
    ]
    for argv in steps:
        assert cli_dispatch(argv) == 0
    for rel in ("corpus/manifest.csv", "corpus/annotations.csv",
                "run/train_report.csv", "run/scores.csv", "run/eval_report.csv",
                "run/agreement_report.csv", "run/band_report.csv",
                "run/band_params.json", "run/model.ckpt"):
        assert (tmp_path / rel).read_bytes() == (workspace / rel).read_bytes(), rel


def test_different_seed_changes_scores(workspace, tmp_path):
    corpus = tmp_path / "corpus"
    assert cli_dispatch(["synth", "--out", str(corpus), "--size", "32",
                         "--count", "80", "--seed", "7"]) == 0
    a = (workspace / "corpus" / "manifest.csv").read_bytes()
    b = (corpus / "manifest.csv").read_bytes()
    assert a != b
