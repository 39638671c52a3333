import json

import numpy as np
import pytest

from pixelrcnn.cli import main
from pixelrcnn.data import read_dataset
from pixelrcnn.layers import load_checkpoint, save_checkpoint

from conftest import REFERENCE_COUNTS


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Small noiseless 3-class dataset and a model trained on it through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--classes", 3, "--per-class", 30, "--noise", 0, "--seed", 5, "--out", root) == 0
    data = root / "dataset.pxrc"
    out = root / "run"
    assert run("train", "--data", data, "--epochs", 30, "--batch", 16, "--eta-max", 0.01,
               "--seed", 1, "--quiet", "--out", out) == 0
    return data, out


def test_synth_counts_and_determinism(tmp_path, capsys):
    assert run("synth", "--classes", 15, "--per-class", 200, "--seed", 7, "--out", tmp_path / "a") == 0
    assert "i=3000" in capsys.readouterr().out
    assert run("synth", "--classes", 15, "--per-class", 200, "--seed", 7, "--out", tmp_path / "b") == 0
    a = (tmp_path / "a" / "dataset.pxrc").read_bytes()
    assert a == (tmp_path / "b" / "dataset.pxrc").read_bytes()
    assert len(read_dataset(tmp_path / "a" / "dataset.pxrc")) == 3000


def test_synth_reference_proportions(tmp_path):
    assert run("synth", "--proportions", "reference", "--total", 9212, "--out", tmp_path) == 0
    counts = read_dataset(tmp_path / "dataset.pxrc").class_counts()
    shares = counts / counts.sum()
    np.testing.assert_allclose(shares, np.array(REFERENCE_COUNTS) / 92116, atol=1e-3)


def test_train_outputs_and_determinism(tmp_path, trained):
    data, out = trained
    for name in ("checkpoint.prcn", "scaler.json", "report.csv", "report.json"):
        assert (out / name).exists()
    assert len((out / "report.csv").read_text().splitlines()) == 31
    again = tmp_path / "again"
    assert run("train", "--data", data, "--epochs", 30, "--batch", 16, "--eta-max", 0.01,
               "--seed", 1, "--quiet", "--out", again) == 0
    for name in ("checkpoint.prcn", "report.csv", "report.json", "scaler.json"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_train_default_epochs(tmp_path):
    assert run("synth", "--classes", 3, "--per-class", 10, "--out", tmp_path) == 0
    assert run("train", "--data", tmp_path / "dataset.pxrc", "--quiet", "--out", tmp_path / "r") == 0
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["epochs"] == 150
    assert len((tmp_path / "r" / "report.csv").read_text().splitlines()) == 151


def test_train_missing_data_exit_2(tmp_path):
    assert run("train", "--data", tmp_path / "nope.pxrc", "--out", tmp_path) == 2


def test_train_divergence_exit_3(tmp_path, capsys):
    cfg = {"train": {"epochs": 2, "schedule": {"eta_max": 1e30}}, "data": {"synth": {"classes": 3, "per_class": 10}}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("train", "--config", tmp_path / "c.json", "--quiet", "--out", tmp_path / "r") == 3
    assert "non-finite" in capsys.readouterr().err
    assert json.loads((tmp_path / "r" / "report.json").read_text())["diverged"] is True


def test_config_rejects_unknown_keys(tmp_path):
    for bad in ({"modle": {}}, {"model": {"units": 3}}, {"train": {"lr": 1}}, {"data": {"file": "x"}},
                {"data": {"synth": {"colours": 3}}}):
        (tmp_path / "c.json").write_text(json.dumps(bad))
        assert run("train", "--config", tmp_path / "c.json", "--out", tmp_path) == 2


def test_flags_override_config(tmp_path):
    cfg = {"train": {"epochs": 5, "batch": 8, "schedule": {"eta_max": 0.01}},
           "data": {"synth": {"classes": 3, "per_class": 10}}, "seed": 4}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("train", "--config", tmp_path / "c.json", "--epochs", 2, "--quiet", "--out", tmp_path / "r") == 0
    assert json.loads((tmp_path / "r" / "report.json").read_text())["epochs"] == 2


def test_eval_fixture(reference_confusion_path, capsys, tmp_path):
    assert run("eval", "--fixture", reference_confusion_path, "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "OA = 0.96645" in out and "kappa = 0.96130" in out
    assert (tmp_path / "eval_report.csv").exists()


def test_eval_model_and_baseline(trained, capsys):
    data, out = trained
    assert run("eval", "--checkpoint", out / "checkpoint.prcn", "--data", data, "--split", "test",
               "--baseline", "--seed", 1) == 0
    text = capsys.readouterr().out
    assert "OA = 1.00000" in text
    assert "logistic baseline OA" in text


def test_eval_errors(trained, tmp_path):
    data, out = trained
    assert run("eval", "--checkpoint", tmp_path / "missing.prcn", "--data", data) == 2
    assert run("synth", "--classes", 4, "--per-class", 5, "--out", tmp_path) == 0
    assert run("eval", "--checkpoint", out / "checkpoint.prcn", "--data", tmp_path / "dataset.pxrc") == 2
    assert run("eval", "--data", data) == 2
    assert run("eval", "--fixture", tmp_path / "none.csv") == 2


def test_predict_noiseless_dataset(trained, tmp_path):
    data, out = trained
    assert run("predict", "--checkpoint", out / "checkpoint.prcn", "--input", data, "--width", 10,
               "--out", tmp_path) == 0
    rows = (tmp_path / "classes.csv").read_text().splitlines()
    assert rows[0] == "row,col,class"
    pred = np.array([int(r.split(",")[2]) for r in rows[1:]])
    assert np.array_equal(pred, read_dataset(data).labels)
    pgm = (tmp_path / "classes.pgm").read_text().split()
    assert pgm[:4] == ["P2", "10", "9", "255"]


def test_predict_shift_invariance(trained, tmp_path):
    data, out = trained
    model = load_checkpoint(out / "checkpoint.prcn")
    model.head.B += 3.0
    save_checkpoint(model, tmp_path / "checkpoint.prcn")
    (tmp_path / "scaler.json").write_bytes((out / "scaler.json").read_bytes())
    assert run("predict", "--checkpoint", out / "checkpoint.prcn", "--input", data, "--out", tmp_path / "a") == 0
    assert run("predict", "--checkpoint", tmp_path / "checkpoint.prcn", "--input", data, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "classes.pgm").read_bytes() == (tmp_path / "b" / "classes.pgm").read_bytes()


def test_predict_single_pixel_grid(trained, tmp_path):
    _, out = trained
    rng = np.random.default_rng(0)
    np.savez(tmp_path / "g.npz", **{b: rng.uniform(0, 0.5, (9, 1, 1)) for b in ("B2", "B3", "B4", "B8")})
    assert run("predict", "--checkpoint", out / "checkpoint.prcn", "--input", tmp_path / "g.npz",
               "--out", tmp_path) == 0
    assert len((tmp_path / "classes.csv").read_text().splitlines()) == 2


def test_predict_shape_mismatch(trained, tmp_path):
    _, out = trained
    np.savez(tmp_path / "g.npz", **{b: np.ones((4, 2, 2)) for b in ("B2", "B3", "B4", "B8")})
    assert run("predict", "--checkpoint", out / "checkpoint.prcn", "--input", tmp_path / "g.npz",
               "--out", tmp_path) == 2


def test_lr_find_rows(trained, tmp_path, capsys):
    data, _ = trained
    assert run("lr-find", "--data", data, "--lo", 1e-5, "--hi", 1e-2, "--iters", 25, "--out", tmp_path) == 0
    assert len((tmp_path / "lr_find.csv").read_text().splitlines()) == 26
    assert "suggested eta_max" in capsys.readouterr().out


def test_pca_outputs(trained, tmp_path):
    data, _ = trained
    assert run("pca", "--data", data, "--components", 3, "--out", tmp_path) == 0
    rows = (tmp_path / "pca_ratios.csv").read_text().splitlines()[1:]
    cum = [float(r.split(",")[2]) for r in rows]
    assert all(b >= a for a, b in zip(cum, cum[1:])) and cum[-1] <= 1 + 1e-12
    assert len((tmp_path / "pca_points.csv").read_text().splitlines()) == 91


def test_inspect_same_class_maps_correlate(tmp_path, capsys):
    assert run("synth", "--classes", 3, "--per-class", 30, "--seed", 5, "--out", tmp_path) == 0
    data = tmp_path / "dataset.pxrc"
    assert run("train", "--data", data, "--epochs", 15, "--batch", 16, "--eta-max", 0.01,
               "--quiet", "--out", tmp_path / "r") == 0
    assert run("inspect", "--checkpoint", tmp_path / "r" / "checkpoint.prcn", "--data", data,
               "--samples", "0,1", "--out", tmp_path / "i") == 0
    a = np.loadtxt(tmp_path / "i" / "inspect_0.csv", delimiter=",", skiprows=1)
    b = np.loadtxt(tmp_path / "i" / "inspect_1.csv", delimiter=",", skiprows=1)
    assert a.shape == (9, 9)
    assert np.corrcoef(a.ravel(), b.ravel())[0, 1] > 0.9


def test_inspect_bad_index(trained, tmp_path):
    data, out = trained
    assert run("inspect", "--checkpoint", out / "checkpoint.prcn", "--data", data, "--samples", "999",
               "--out", tmp_path) == 2


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
