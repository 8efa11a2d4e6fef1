import csv
import subprocess
import sys

import numpy as np
import pytest

from pc2m.cli import main
from pc2m.config import loads
from pc2m.spectral import read_pseudo_labels
from pc2m.synth import DatasetSpec, gen_dataset, save_dataset

TINY = ["--image-count", "20", "--epochs", "2", "--batch-size", "8"]


def _csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_gen_data_and_train(tmp_path):
    data_dir = tmp_path / "data"
    assert main(["gen-data", "--out", str(data_dir), "--image-count", "20"]) == 0
    assert (data_dir / "images.bin").exists()
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--data-dir", str(data_dir), "--epochs", "2", "--batch-size", "8"]) == 0
    for name in ("checkpoint.bin", "epochs.csv", "steps.csv", "report.csv", "config.txt"):
        assert (out / name).exists(), name
    assert loads((out / "config.txt").read_text()).epochs == 2
    epochs = _csv(out / "epochs.csv")
    assert len(epochs) == 3
    report = dict(_csv(out / "report.csv")[1:])
    assert float(report["miou"]) == pytest.approx(float(epochs[-1][epochs[0].index("miou")]))

    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--out", str(ev),
                 "--data-dir", str(data_dir)]) == 0
    assert dict(_csv(ev / "report.csv")[1:])["miou"] == report["miou"]
    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--out", str(ev),
                 "--data-dir", str(data_dir), "--split", "all", "--no-background"]) == 0


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text("image_count = 20\nepochs = 5\nbatch_size = 8\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--warmup-epochs", "0", "--out", str(out)]) == 0
    assert len(_csv(out / "epochs.csv")) == 2


def test_unsupervised_train_writes_pseudo_labels(tmp_path):
    out = tmp_path / "unsup"
    assert main(["train", "--out", str(out), "--mode", "unsupervised", *TINY]) == 0
    ids, sets = read_pseudo_labels(out / "pseudo_labels.txt")
    assert len(ids) == 16 and all(sets)


def test_pseudo_labels_command(tmp_path):
    path = tmp_path / "pseudo.txt"
    assert main(["pseudo-labels", "--out", str(path), "--image-count", "12"]) == 0
    ids, sets = read_pseudo_labels(path)
    assert ids == list(range(12)) and all(sets)


def test_sweep_command(tmp_path):
    assert main(["sweep", "--parameter", "gamma", "--values", "0,0.2", "--out", str(tmp_path), *TINY]) == 0
    rows = _csv(tmp_path / "sweep.csv")
    assert rows[0][:3] == ["parameter", "value", "miou"] and len(rows) == 3


def test_grad_check_command(capsys):
    assert main(["grad-check", "--entries", "3"]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert main(["grad-check", "--entries", "3", "--tolerance", "1e-30"]) == 1


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--out", "x", "--gamma", "2"],
        ["train", "--out", "x", "--mode", "bogus"],
        ["train", "--out", "x", "--epochs", "ten"],
        ["train", "--out", "x", "--config", "/nonexistent/run.txt"],
        ["eval", "--checkpoint", "c", "--out", "x", "--data-dir", "/nonexistent"],
        ["sweep", "--parameter", "gamma", "--values", "0.1", "--out", "x"],
        ["sweep", "--parameter", "gamma", "--values", "a,b", "--out", "x"],
    ],
)
def test_config_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["train", "--out", "x", "--no-such-flag", "1"])
    assert info.value.code == 2


def test_class_mismatch_exits_2(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *TINY]) == 0
    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--out", str(tmp_path / "e"),
                 "--class-count", "4", "--image-count", "20"]) == 2


def test_numerical_abort_exits_3(tmp_path):
    data = gen_dataset(DatasetSpec(image_count=10))
    for x in data:
        x.image[:] = np.nan
    save_dataset(tmp_path / "bad", data)
    out = tmp_path / "run"
    code = main(["train", "--out", str(out), "--data-dir", str(tmp_path / "bad"), "--epochs", "2", "--batch-size", "4"])
    assert code == 3
    assert (out / "abort_dump.bin").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pc2m.cli", "train", "--out", str(tmp_path), "--gamma", "-1"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "gamma" in proc.stderr
