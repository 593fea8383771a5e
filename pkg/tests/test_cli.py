import json
import os

import numpy as np
import pytest

from segin.cli import run
from segin.data import load_image, synth_shapes_dataset
from segin.features import FeatureMap
from segin.tensorio import read_segt

TINY = "batch_size = 2\ndisc_channels = 8\ngenerator.base_channels = 8\n"


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(["synth-data", "--out", str(d), "--n", "6", "--n-test", "4", "--size", "32", "--seed", "2"]) == 0
    (d / "tiny.ini").write_text(TINY)
    return d


def test_match_outputs(root, tmp_path):
    out = tmp_path / "m"
    code = run(["match", "--input", str(root / "trainA" / "0000.png"), "--ref", str(root / "trainB" / "0001.png"),
                "--out", str(out), "--size", "32"])
    assert code == 0
    for name in ("aux.png", "mask.png", "corr.segt"):
        assert (out / name).exists()
    data, shape = read_segt(out / "corr.segt")
    assert data.shape == (8, 8, 2) and shape == (32, 32)
    assert np.all(data[..., 0] == np.rint(data[..., 0]))
    mask = load_image(str(out / "mask.png"))
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_usage_errors_exit_2(capsys):
    assert run(["match", "--input", "a.png"]) == 2
    assert run(["train", "--bogus-flag"]) == 2
    assert run(["nope"]) == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    assert run(["match", "--input", str(tmp_path / "a.png"), "--ref", str(tmp_path / "b.png"),
                "--out", str(tmp_path)]) == 1
    assert "missing image" in capsys.readouterr().err


def test_train_translate_evaluate(root, tmp_path, capsys, monkeypatch):
    out = tmp_path / "run"
    monkeypatch.setenv("SEGIN_DATA_ROOT", str(root))
    assert run(["train", "--out", str(out), "--steps", "3", "--seed", "4",
                "--config", str(root / "tiny.ini"), "--size", "32"]) == 0
    printed = capsys.readouterr().out
    assert '"seed": "4"' in printed and '"batch_size": "2"' in printed
    ckpt = out / "final.zip"
    assert ckpt.exists() and (out / "losses.csv").exists()

    tdir = tmp_path / "t"
    assert run(["translate", "--checkpoint", str(ckpt), "--input", str(root / "testA" / "0000.png"),
                "--ref", str(root / "testB" / "0001.png"), "--out", str(tdir)]) == 0
    for name in ("y_hat.png", "seg_hat.png", "grid.png"):
        assert (tdir / name).exists()
    assert load_image(str(tdir / "grid.png")).shape == (32, 128, 3)

    edir = tmp_path / "e"
    assert run(["evaluate", "--checkpoint", str(ckpt), "--out", str(edir), "--n-inputs", "4", "--pairs", "2",
                "--n-references", "3", "--seed", "0"]) == 0
    reports = json.loads((edir / "metrics.json").read_text())
    assert {r["metric"] for r in reports} == {"fid_proxy", "lpips_gt_proxy", "lpips_ref_proxy", "diversity_proxy"}
    assert all(r["value"] >= 0 for r in reports)


def test_evaluate_empty_test_set(root, tmp_path, capsys):
    empty = tmp_path / "empty"
    assert run(["synth-data", "--out", str(empty), "--n", "2", "--n-test", "0", "--size", "32"]) == 0
    out = tmp_path / "r"
    assert run(["train", "--data", str(empty), "--out", str(out), "--steps", "1", "--size", "32",
                "--config", str(root / "tiny.ini")]) == 0
    capsys.readouterr()
    assert run(["evaluate", "--checkpoint", str(out / "final.zip"), "--data", str(empty), "--out", str(out)]) == 1
    assert "empty test set" in capsys.readouterr().err


def test_ablate_writes_metrics(root, tmp_path):
    out = tmp_path / "ab"
    assert run(["ablate", "--disable", "tv", "--data", str(root), "--out", str(out), "--steps", "2", "--size", "32",
                "--config", str(root / "tiny.ini"), "--n-inputs", "4", "--pairs", "1"]) == 0
    assert (out / "metrics.json").exists()
    assert "tv = 0.0" in (out / "config.ini").read_text()


def test_build_dataset(root, tmp_path):
    assert run(["build-dataset", "--data", str(root), "--split", "test", "--size", "32"]) == 0
    assert (root / "seg" / "test" / "0000.png").exists()


def test_missing_data_root(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("SEGIN_DATA_ROOT", raising=False)
    assert run(["train", "--out", str(tmp_path)]) == 1
