import json
import math

import numpy as np
import pytest

from aniso_sr.autodiff import save_weights
from aniso_sr.autoencoder import AeConfig, Autoencoder
from aniso_sr.cli import main
from aniso_sr.harness import CSV_COLUMNS, parse_records_csv, parse_structured
from aniso_sr.phantom import phantom_set
from aniso_sr.volume_io import Volume, load_volume, write_volume

TRAIN_FLAGS = ["--max-steps", "10", "--batch-size", "2", "--patch", "16", "--val-interval", "5"]


def _phantom_dir(path, count=3, slices=5, size=48, seed=0):
    path.mkdir(exist_ok=True)
    for i, v in enumerate(phantom_set(count, seed=seed, slices=slices, size=size)):
        write_volume(Volume(v.data, (5.0, 1.4, 1.4)), path / f"vol{i:02d}.nii")
    return path


@pytest.fixture(scope="module")
def model_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.bin"
    save_weights(Autoencoder(seed=1).state(), path)
    return path


def test_train_empty_directory_is_data_error(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["train", "--data", str(empty), "--out", str(tmp_path / "m.bin")]) == 3
    assert str(empty) in capsys.readouterr().err
    assert not (tmp_path / "m.bin").exists()


def test_train_writes_model_and_log_deterministically(tmp_path, capsys):
    data = _phantom_dir(tmp_path / "train")
    val = _phantom_dir(tmp_path / "val", count=1, seed=5)
    outs = []
    for k in range(2):
        out = tmp_path / f"m{k}.bin"
        assert main(["-q", "train", "--data", str(data), "--val", str(val), "--out", str(out),
                     "--seed", "3"] + TRAIN_FLAGS) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["steps"] == 10 and report["best_step"] in (5, 10)
        log = tmp_path / f"m{k}.bin.log.csv"
        lines = log.read_text().splitlines()
        assert lines[0] == "step,loss,val_loss" and len(lines) == 11
        outs.append((out.read_bytes(), log.read_bytes()))
    assert outs[0] == outs[1]


def test_train_config_file_and_set_override(tmp_path, capsys):
    data = _phantom_dir(tmp_path / "train", count=2)
    cfg = tmp_path / "train.cfg"
    cfg.write_text("max_steps = 7  # short\npatch = 16\nbatch_size = 2\nrot90 = false\n")
    log = tmp_path / "run.csv"
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "m.bin"), "--config", str(cfg),
                 "--set", "max_steps=4", "--log", str(log)]) == 0
    assert json.loads(capsys.readouterr().out)["steps"] == 4
    assert len(log.read_text().splitlines()) == 5


@pytest.mark.parametrize("extra", [["--set", "patch=40"], ["--set", "bogus=1"], ["--set", "novalue"],
                                   ["--lr", "-1"]])
def test_train_bad_options_are_config_errors(tmp_path, extra):
    data = _phantom_dir(tmp_path / "train", count=1)
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "m.bin")] + extra) == 2
    assert not (tmp_path / "m.bin").exists()


def test_zero_steps_writes_header_only_log(tmp_path, capsys):
    data = _phantom_dir(tmp_path / "train", count=1)
    out = tmp_path / "m.bin"
    assert main(["train", "--data", str(data), "--out", str(out), "--max-steps", "0"]) == 0
    assert (tmp_path / "m.bin.log.csv").read_text() == "step,loss,val_loss\n"
    assert out.exists()


def test_superres_slice_count_and_spacing(tmp_path, model_file, capsys):
    v = Volume(phantom_set(1, slices=10, size=32)[0].data, (8.0, 1.4, 1.4))
    src = tmp_path / "in.nii"
    write_volume(v, src)
    out = tmp_path / "out.json"
    assert main(["superres", str(src), "--model", str(model_file), "--out", str(out),
                 "--format", "raw"]) == 0
    result = load_volume(out)
    assert result.shape == (19, 32, 32)
    assert result.spacing[0] == pytest.approx(4.0)
    assert json.loads(capsys.readouterr().out)["shape"] == [19, 32, 32]


def test_superres_missing_model_writes_nothing(tmp_path, capsys):
    src = tmp_path / "in.nii"
    write_volume(phantom_set(1, slices=3, size=32)[0], src)
    out = tmp_path / "out.nii"
    assert main(["superres", str(src), "--model", str(tmp_path / "nope.bin"), "--out", str(out)]) == 2
    assert "nope.bin" in capsys.readouterr().err
    assert not out.exists()


def test_superres_fingerprint_mismatch(tmp_path):
    small = tmp_path / "small.bin"
    save_weights(Autoencoder(AeConfig(base_channels=4)).state(), small)
    src = tmp_path / "in.nii"
    write_volume(phantom_set(1, slices=3, size=32)[0], src)
    assert main(["superres", str(src), "--model", str(small), "--out", str(tmp_path / "o.nii")]) == 2
    assert main(["superres", str(src), "--model", str(small), "--out", str(tmp_path / "o.nii"),
                 "--factor", "1"]) == 2
    assert not (tmp_path / "o.nii").exists()


def test_evaluate_rows_and_rerun_identical(tmp_path, model_file, capsys, monkeypatch):
    data = _phantom_dir(tmp_path / "test", count=1, slices=5)
    reports = []
    for k, threads in enumerate(["1", "2"]):
        monkeypatch.setenv("ANISO_SR_THREADS", threads)
        out = tmp_path / f"r{k}.csv"
        assert main(["evaluate", "--model", str(model_file), "--data", str(data), "--out", str(out)]) == 0
        capsys.readouterr()
        reports.append(out.read_bytes())
        records = parse_records_csv(out.read_text())
        assert len(records) == 8
        summary = parse_structured((tmp_path / f"r{k}.summary.json").read_text())
        assert set(summary["stats"]) == {"ae", "linear", "bspline3", "lanczos3"}
    assert reports[0] == reports[1]
    assert reports[0].decode().splitlines()[0] == ",".join(CSV_COLUMNS)


def test_evaluate_errors(tmp_path, model_file, monkeypatch):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["evaluate", "--model", str(model_file), "--data", str(empty),
                 "--out", str(tmp_path / "r.csv")]) == 3
    monkeypatch.setenv("ANISO_SR_THREADS", "zero")
    data = _phantom_dir(tmp_path / "d", count=1)
    assert main(["evaluate", "--model", str(model_file), "--data", str(data),
                 "--out", str(tmp_path / "r.csv")]) == 2
    assert main(["evaluate", "--model", str(model_file), "--data", str(data),
                 "--out", str(tmp_path / "r.csv"), "--threads", "0"]) == 2
    assert not (tmp_path / "r.csv").exists()


def test_metrics_self_comparison(tmp_path, capsys):
    src = tmp_path / "a.nii"
    write_volume(phantom_set(1, slices=3, size=48)[0], src)
    assert main(["metrics", str(src), str(src)]) == 0
    doc = parse_structured(capsys.readouterr().out)
    assert len(doc["slices"]) == 3
    for row in doc["slices"]:
        assert row["psnr_db"] == "inf"
        assert abs(row["ssim"] - 1.0) < 1e-9 and abs(row["vif"] - 1.0) < 1e-6
    assert doc["mean"]["psnr_db"] == "inf"


def test_metrics_shape_mismatch(tmp_path, capsys):
    a, b = tmp_path / "a.nii", tmp_path / "b.nii"
    write_volume(Volume(np.random.default_rng(0).random((2, 32, 32)), (1, 1, 1)), a)
    write_volume(Volume(np.random.default_rng(1).random((3, 32, 32)), (1, 1, 1)), b)
    assert main(["metrics", str(a), str(b)]) == 3
    err = capsys.readouterr().err
    assert "(2, 32, 32)" in err and "(3, 32, 32)" in err


def test_metrics_finite_noise(tmp_path, capsys):
    rng = np.random.default_rng(2)
    base = phantom_set(1, slices=2, size=48)[0].data
    a, b = tmp_path / "a.nii", tmp_path / "b.nii"
    write_volume(Volume(base, (1, 1, 1)), a)
    write_volume(Volume(np.clip(base + rng.normal(0, 0.05, base.shape), 0, 1), (1, 1, 1)), b)
    assert main(["metrics", str(a), str(b)]) == 0
    doc = parse_structured(capsys.readouterr().out)
    assert all(math.isfinite(r["psnr_db"]) and r["ssim"] < 1.0 for r in doc["slices"])


def test_verbose_and_quiet_are_exclusive(capsys):
    with pytest.raises(SystemExit) as info:
        main(["-v", "-q", "metrics", "a", "b"])
    assert info.value.code == 2


def test_missing_input_file_is_data_error(tmp_path):
    assert main(["metrics", str(tmp_path / "x.nii"), str(tmp_path / "y.nii")]) == 3
