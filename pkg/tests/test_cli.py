import json
import subprocess
import sys

import numpy as np
import pytest

import oracles
from cdcm.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_OK, main
from cdcm.config import ExperimentConfig


def tiny_run_args(slices, out, *extra):
    return [
        "train",
        "--dataset", "slices",
        "--slice-root", str(slices),
        "--model", "custom",
        "--block-widths", "4,4,4,4",
        "--dense-widths", "8",
        "--latent-dim", "4",
        "--max-epochs", "1",
        "--batch-size", "16",
        "--seeds", "1",
        "--out", str(out),
        *extra,
    ]


@pytest.fixture(scope="module")
def slices(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["build-data", "--synthetic", "--cases", "5", "--controls", "5", "--slices-per-patient", "3", "--seed", "2", "--out", str(root)]) == EXIT_OK
    return root / "slices"


@pytest.fixture(scope="module")
def cdcm_run(slices, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "cdcm"
    assert main(tiny_run_args(slices, out, "--augment", "false")) == EXIT_OK
    return out


# -- build-data ---------------------------------------------------------------
def test_build_data_manifests_are_reproducible(tmp_path):
    assert main(["build-data", "--modified-cifar10", "--normal-class", "8,3", "--seed", "0", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["build-data", "--modified-cifar10", "--normal-class", "8,3", "--seed", "0", "--out", str(tmp_path / "b")]) == EXIT_OK
    for k in (8, 3):
        name = f"modified_cifar10_class{k}_seed0.json"
        a, b = (tmp_path / "a" / name).read_bytes(), (tmp_path / "b" / name).read_bytes()
        assert a == b
    doc = json.loads((tmp_path / "a" / "modified_cifar10_class8_seed0.json").read_text())
    assert doc["normal_class"] == 8
    assert doc["seen_anomaly_classes"] == [9, 0, 1, 2, 3] and doc["unseen_anomaly_classes"] == [4, 5, 6, 7]
    assert doc["counts"]["train"] == {"normal": 4000, "anomaly": 400}


def test_build_data_bad_class_exit_2(tmp_path, capsys):
    assert main(["build-data", "--modified-cifar10", "--normal-class", "11", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "normal-class must be in 0..9" in capsys.readouterr().err


def test_build_data_needs_a_target(tmp_path):
    assert main(["build-data", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_synthetic_build_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        main(["build-data", "--synthetic", "--cases", "5", "--controls", "2", "--slices-per-patient", "3", "--seed", "1", "--out", str(tmp_path / name)])
    fa = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    fb = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.png"))
    assert fa == fb and len(fa) == 21
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in fa)


# -- train / evaluate ---------------------------------------------------------
def test_train_writes_run_directory(cdcm_run):
    assert (cdcm_run / "config.txt").is_file()
    assert (cdcm_run / "seed_0" / "checkpoints" / "best.pt").is_file()
    assert (cdcm_run / "seed_0" / "history.csv").is_file()
    run = json.loads((cdcm_run / "run.json").read_text())
    assert run["threshold"] == 5.0 and run["head"] == "metric"
    cfg = ExperimentConfig.load(cdcm_run / "config.txt")
    assert cfg.block_widths == "4,4,4,4" and cfg.augment is False


def test_evaluate_three_splits(cdcm_run):
    assert main(["evaluate", "--run", str(cdcm_run), "--splits", "train,val,test", "--bins", "10"]) == EXIT_OK
    for s in ("train", "val", "test"):
        assert (cdcm_run / "seed_0" / "eval" / f"histogram_{s}.csv").is_file()
        assert (cdcm_run / "seed_0" / "eval" / f"histogram_{s}.png").is_file()
        rows = json.loads((cdcm_run / f"metrics_{s}.json").read_text())
        assert rows[0]["split"] == s and 0 <= rows[0]["f2"] <= 1
    summary = json.loads((cdcm_run / "evaluation_summary.json").read_text())
    assert set(summary["splits"]) == {"train", "val", "test"}


def test_evaluate_unknown_split_and_missing_checkpoint(cdcm_run, tmp_path):
    assert main(["evaluate", "--run", str(cdcm_run), "--splits", "holdout"]) == EXIT_CONFIG
    (tmp_path / "config.txt").write_text((cdcm_run / "config.txt").read_text())
    assert main(["evaluate", "--run", str(tmp_path)]) == EXIT_CONFIG
    assert main(["evaluate", "--run", str(tmp_path / "nowhere")]) == EXIT_CONFIG


def test_bce_run_records_half_threshold(slices, tmp_path):
    assert main(tiny_run_args(slices, tmp_path / "bce", "--loss", "bce", "--augment", "false")) == EXIT_OK
    assert json.loads((tmp_path / "bce" / "run.json").read_text())["threshold"] == 0.5
    res = json.loads((tmp_path / "bce" / "seed_0" / "result.json").read_text())
    assert res["threshold"] == 0.5


def test_head_loss_mismatch_exit_2(slices, tmp_path):
    assert main(tiny_run_args(slices, tmp_path / "x", "--loss", "cdcm", "--head", "classifier")) == EXIT_CONFIG
    assert not (tmp_path / "x" / "seed_0").exists()


def test_missing_cifar_root_exit_2(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CDCM_CIFAR_ROOT", str(tmp_path / "absent"))
    assert main(["train", "--max-epochs", "1", "--seeds", "1", "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert "cifar_root" in capsys.readouterr().err


def test_non_finite_loss_exit_3(slices, tmp_path):
    # a huge learning rate drives the cDCM embedding to overflow
    code = main(tiny_run_args(slices, tmp_path / "nan", "--lr", "1e30", "--max-epochs", "3", "--augment", "false"))
    assert code == EXIT_ABORT
    res = json.loads((tmp_path / "nan" / "seed_0" / "result.json").read_text())
    assert res["aborted"] and (tmp_path / "nan" / "seed_0" / "abort_report.json").is_file()


def test_config_file_round_trip(tmp_path):
    cfg = ExperimentConfig(loss="focal", normal_class=3, margin=10.0)
    path = cfg.write(tmp_path / "c.txt")
    assert ExperimentConfig.load(path) == cfg
    text = path.read_text()
    assert "loss = focal" in text and "# " in text
    assert ExperimentConfig.load(path, {"seed": "7"}).seed == 7


# -- compare / report ---------------------------------------------------------
def write_f2_csv(path, rows=oracles.F2_MATRIX):
    lines = ["class," + ",".join(oracles.F2_TREATMENTS)]
    lines += [b + "," + ",".join(str(v) for v in r) for b, r in zip(oracles.F2_BLOCKS, rows)]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_compare_on_f2_table(tmp_path, capsys):
    csv = write_f2_csv(tmp_path / "f2.csv")
    assert main(["compare", "--csv", str(csv), "--control", "cDCM", "--out", str(tmp_path / "cmp")]) == EXIT_OK
    doc = json.loads((tmp_path / "cmp" / "stats.json").read_text())
    assert doc["rank_sums"] == [12, 44, 31, 44, 19]
    assert doc["friedman_chi2"] == pytest.approx(33.52, abs=0.01)
    assert (tmp_path / "cmp" / "cd_diagram.svg").is_file()
    assert "DeepSAD" in (tmp_path / "cmp" / "cd_table.txt").read_text()
    assert "Friedman" in capsys.readouterr().out


def test_compare_hole_exit_2(tmp_path, capsys):
    rows = [list(r) for r in oracles.F2_MATRIX]
    csv = write_f2_csv(tmp_path / "f2.csv", rows)
    text = csv.read_text().splitlines()
    parts = text[3].split(",")
    parts[2] = ""
    text[3] = ",".join(parts)
    csv.write_text("\n".join(text) + "\n")
    assert main(["compare", "--csv", str(csv), "--out", str(tmp_path / "cmp")]) == EXIT_CONFIG
    assert f"({oracles.F2_BLOCKS[2]}, BCE)" in capsys.readouterr().err


def test_compare_two_treatments(tmp_path):
    (tmp_path / "two.csv").write_text("block,a,b\nx,0.9,0.1\ny,0.8,0.2\nz,0.7,0.75\n")
    assert main(["compare", "--csv", str(tmp_path / "two.csv"), "--out", str(tmp_path / "o")]) == EXIT_OK
    doc = json.loads((tmp_path / "o" / "stats.json").read_text())
    assert doc["q_alpha"] == pytest.approx(1.959964, abs=1e-5)


def test_compare_unknown_control(tmp_path):
    csv = write_f2_csv(tmp_path / "f2.csv")
    assert main(["compare", "--csv", str(csv), "--control", "SVM", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_report_collects_runs(cdcm_run, slices, tmp_path):
    main(["evaluate", "--run", str(cdcm_run), "--splits", "test"])
    out = tmp_path / "m.csv"
    assert main(["report", "--runs", str(cdcm_run), "--split", "test", "--metric", "aucroc", "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "normal_class,cdcm"
    value = float(lines[1].split(",")[1])
    rows = json.loads((cdcm_run / "metrics_test.json").read_text())
    assert value == pytest.approx(np.mean([r["aucroc"] for r in rows]))
    assert (tmp_path / "m_std.csv").is_file()
    assert main(["report", "--runs", str(cdcm_run), "--metric", "aucroc", "--per-seed", "--out", str(tmp_path / "s.csv")]) == EXIT_OK
    assert (tmp_path / "s.csv").read_text().splitlines()[1].startswith("8/seed_0,")


def test_module_entry_point():
    p = subprocess.run([sys.executable, "-m", "cdcm", "--help"], capture_output=True, text=True)
    assert p.returncode == 0
    for cmd in ("build-data", "train", "evaluate", "compare", "report"):
        assert cmd in p.stdout
