import json

import numpy as np
import pytest

from dprgnet.cli import main
from dprgnet.io import load_checkpoint, load_dataset

SMALL = ["--epochs", "2", "--patience", "2", "--batch-size", "4"]


@pytest.fixture(scope="module")
def data_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "data.bin"
    assert main(["synth", "--out", str(path), "--subjects", "2", "--steps", "10", "--grid", "16", "8",
                 "--stance-len", "8", "--noise", "0.01", "--sensor-lag", "1.0"]) == 0
    return path


def test_synth_writes_container(data_path):
    data = load_dataset(data_path)
    assert len(data.samples) == 20 and data.grid == (16, 8)
    assert data.extra["synth"]["sensor_lag"] == 1.0


def test_train_eval_predict(data_path, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--data", str(data_path), "--out", str(ckpt)] + SMALL) == 0
    history = [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.startswith("{")]
    assert [h["epoch"] for h in history] == [0, 1]
    assert load_checkpoint(ckpt).model_config["grid_h"] == 16

    report = tmp_path / "cv.json"
    assert main(["eval", "--data", str(data_path), "--variant", "cnn", "--out", str(report)] + SMALL) == 0
    out = capsys.readouterr().out
    rows = [line for line in out.splitlines() if line.split() and line.split()[0].isdigit()]
    assert len(rows) == 5
    assert len(json.loads(report.read_text())["folds"]) == 5

    preds = tmp_path / "p.csv"
    assert main(["predict", "--data", str(data_path), "--ckpt", str(ckpt), "--out", str(preds)]) == 0
    text = preds.read_text()
    assert text.count("# sample") == 20 and "# metrics" in text


def test_resume_matches_single_run(data_path, tmp_path, capsys):
    full, part, resumed = tmp_path / "f.ckpt", tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    args = ["--data", str(data_path), "--epochs", "3", "--patience", "3", "--batch-size", "4"]
    assert main(["train", "--out", str(full)] + args) == 0
    assert main(["train", "--out", str(part), "--stop-after", "0"] + args) == 0
    assert main(["train", "--out", str(resumed), "--resume", str(part)] + args) == 0
    capsys.readouterr()
    a, b = load_checkpoint(full), load_checkpoint(resumed)
    assert a.training["history"] == b.training["history"]
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_priors_command(data_path, tmp_path, capsys):
    out = tmp_path / "pri.bin"
    assert main(["priors", "--data", str(data_path), "--out", str(out)]) == 0
    assert "otsu threshold" in capsys.readouterr().out
    labels = (tmp_path / "pri.bin.labels.txt").read_text().splitlines()
    assert len(labels) >= 16


def test_config_file_then_flags(data_path, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "patience": 1, "batch_size": 4, "lr": 0.5}))
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(cfg), "--lr", "0.002", "--data", str(data_path), "--out", str(ckpt)]) == 0
    capsys.readouterr()
    tc = load_checkpoint(ckpt).train_config
    assert tc["max_epochs"] == 1 and tc["base_lr"] == 0.002


def test_adversarial_synth_reports_skip(tmp_path, capsys):
    out = tmp_path / "adv.bin"
    assert main(["synth", "--adversarial", "--out", str(out), "--subjects", "2", "--steps", "4",
                 "--grid", "16", "8", "--stance-len", "8"]) == 0
    text = capsys.readouterr().out
    assert "1 skipped" in text
    assert load_dataset(out).extra["preprocess"]["skipped"] == 1


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--variant", "cnn"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_unknown_flag_exits_2(capsys):
    assert main(["train", "--no-such-flag"]) == 2
    capsys.readouterr()


def test_error_is_one_line(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing.bin"), "--out", str(tmp_path / "x")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("dprgnet train: error:") and err.count("\n") == 1


def test_corrupt_input_is_reported(data_path, tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    blob = bytearray(data_path.read_bytes())
    blob[100] ^= 0xFF
    bad.write_bytes(bytes(blob))
    assert main(["priors", "--data", str(bad), "--out", str(tmp_path / "p")]) == 1
    assert "checksum" in capsys.readouterr().err
