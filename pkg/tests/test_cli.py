import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from lt3d.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, main
from lt3d.data import read_raw, write_raw


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(
        "# small run for tests\n"
        "volume_shape = [8, 16, 16]\n"
        "n_phantoms = 4\n"
        "epochs = 1\n"
        "network.base_channels = 2\n"
        "network.levels = 3\n"
        "augment.max_shift = 1\n"
        'phantom_seed = 3\n'
    )
    return path


def make_phantoms(tmp_path, config):
    # phantoms at the tiny volume shape
    from lt3d.data import PhantomSpec, write_phantom_dataset
    return write_phantom_dataset(tmp_path / "data", 4, 3, PhantomSpec(shape=(8, 16, 16)))


def test_phantoms_command(tmp_path, capsys):
    assert main(["phantoms", "--out", str(tmp_path / "ph"), "--n", "2", "--seed", "1"]) == 0
    manifest = json.loads((tmp_path / "ph" / "manifest.json").read_text())
    assert len(manifest) == 2
    assert "event=phantoms" in capsys.readouterr().out


def test_train_eval_predict(tmp_path, tiny_config, capsys):
    manifest = make_phantoms(tmp_path, tiny_config)
    run = tmp_path / "run"
    common = ["--config", str(tiny_config), "--out", str(run), "--threads", "1"]
    with open(tiny_config, "a") as fh:
        fh.write(f'manifest = "{manifest}"\n')
    assert main(["train", *common, "--seed", "4"]) == 0
    assert (run / "model.ckpt").exists() and (run / "train_log.csv").exists()
    assert "epoch=1" in capsys.readouterr().out

    assert main(["eval", *common, "--seed", "4", "--checkpoint", str(run / "model.ckpt")]) == 0
    report = json.loads((run / "eval.json").read_text())
    assert {"cases", "summary", "regions_pooled", "regions_averaged"} <= set(report)
    assert "dice_mean=" in (run / "eval.txt").read_text()

    img = tmp_path / "data" / "case_000.ltv"
    assert main(["predict", *common, "--seed", "4", "--checkpoint", str(run / "model.ckpt"),
                 "--input", str(img)]) == 0
    mask, _ = read_raw(run / "case_000.mask.ltv")
    assert mask.shape == (8, 16, 16)

    # a different seed changes the digest and is refused
    assert main(["eval", *common, "--seed", "5", "--checkpoint", str(run / "model.ckpt")]) == EXIT_CONFIG


def test_predict_rejects_bad_shape(tmp_path, tiny_config):
    manifest = make_phantoms(tmp_path, tiny_config)
    run = tmp_path / "run"
    with open(tiny_config, "a") as fh:
        fh.write(f'manifest = "{manifest}"\nepochs = 1\n')
    assert main(["train", "--config", str(tiny_config), "--out", str(run)]) == 0
    bad = tmp_path / "bad.ltv"
    write_raw(bad, np.zeros((8, 15, 16), np.float32), (1.0, 1.0, 1.0))
    code = main(["predict", "--config", str(tiny_config), "--out", str(run),
                 "--checkpoint", str(run / "model.ckpt"), "--input", str(bad)])
    assert code == EXIT_DATA


def test_config_error_exit(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("lr = -3\n")
    assert main(["phantoms", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_data_error_exit(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f'manifest = "{tmp_path / "missing.json"}"\n')
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == EXIT_DATA


def test_numeric_failure_exit(tmp_path, tiny_config, monkeypatch):
    manifest = make_phantoms(tmp_path, tiny_config)
    with open(tiny_config, "a") as fh:
        fh.write(f'manifest = "{manifest}"\n')
    import lt3d.train as tr

    real = tr.total_deep_supervision_loss

    def poisoned(stages, label, conventional=False):
        rep = real(stages, label, conventional)
        rep.total.data[...] = np.nan
        return rep
    monkeypatch.setattr(tr, "total_deep_supervision_loss", poisoned)
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "r")]) == EXIT_NUMERIC


def test_bench_sampler_csv(tmp_path, capsys):
    assert main(["bench", "sampler", "--cases", "20", "--alpha", "0.5", "--beta", "0.2", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "bench_sampler.csv")))
    assert len(rows) == 20 and rows[0]["schema"] == "lt3d-bench/1"
    assert "mean_fraction=" in capsys.readouterr().out


def test_bench_attention_csv(tmp_path):
    assert main(["bench", "attention", "--sizes", "64", "128", "--repeats", "2", "--dim", "8",
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "bench_attention.csv")))
    assert {r["variant"] for r in rows} == {"linear", "quadratic"}


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "lt3d", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "predict", "eval", "phantoms", "bench"):
        assert cmd in out.stdout
