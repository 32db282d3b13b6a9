import json
import subprocess
import sys

import numpy as np
import pytest

from transferattack import cli
from transferattack.models import load_checkpoint, save_checkpoint
from transferattack.oracle import HttpOracle


def test_train_oracle(tmp_path, capsys):
    out = tmp_path / "o.npz"
    rc = cli.main(["train-oracle", "--arch", "cnn-a", "--classes", "2", "--per-class", "4", "--size", "16",
                   "--epochs", "1", "--out", str(out)])
    assert rc == 0 and "training accuracy" in capsys.readouterr().out
    m = load_checkpoint(out)
    assert m.class_names == ["disc", "square"] and m.input_shape == (16, 16, 3)


def test_run_and_report(tmp_path, trained_small, capsys):
    ck = save_checkpoint(trained_small, tmp_path / "oracle.npz")
    config = {
        "dataset": {"kind": "synthetic", "classes": 4, "per_class": 2},
        "oracle": {"kind": "local", "model": str(ck)},
        "substitute": {"backbone": str(ck), "training": {"epochs": 3}},
        "attacks": [{"kind": "fgsm"}],
        "epsilons": [2, 4],
    }
    (tmp_path / "c.json").write_text(json.dumps(config))
    out = tmp_path / "rep"
    assert cli.main(["run", "--config", str(tmp_path / "c.json"), "--out", str(out)]) == 0
    assert "queries: total=24" in capsys.readouterr().out
    assert (out / "report.json").exists() and (out / "ssim.png").exists()
    (out / "psnr.png").unlink()
    assert cli.main(["report", "--in", str(out)]) == 0
    assert (out / "psnr.png").exists()
    assert "fgsm" in capsys.readouterr().out


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])


def test_serve_oracle_process(tmp_path, trained_small):
    ck = save_checkpoint(trained_small, tmp_path / "o.npz")
    proc = subprocess.Popen(
        [sys.executable, "-m", "transferattack.cli", "serve-oracle", "--model", str(ck), "--bind", "127.0.0.1:0"],
        stdout=subprocess.PIPE, text=True,
    )
    try:
        line = proc.stdout.readline()
        url = line.split(" at ")[1].rsplit("/classify", 1)[0]
        verdict = HttpOracle(url).classify(np.zeros(trained_small.input_shape, np.uint8), "x")
        assert verdict.label in trained_small.class_names
    finally:
        proc.terminate()
        proc.wait(timeout=10)
