import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest
import yaml

from megphone import io
from megphone.cli import main
from megphone.training import TrainLog


def toy_config(out, **overrides):
    cfg = {
        "data": {"synthetic": {"n_per_class": 10, "snr": 4.0, "seed": 1, "n_classes": 2, "drift": 0.0}},
        "model": {"hidden_dim": 8, "n_classes": 2, "n_blocks": 3, "kernel_size": 3},
        "train": {
            "lr": 1e-2,
            "epochs": 4,
            "batch_size": 8,
            "sampling": {"group_size": 1},
            "augment": {"p_apply": 0.0},
        },
        "output_dir": str(out),
    }
    for section, values in overrides.items():
        cfg[section].update(values)
    return cfg


def write_config(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(autouse=True)
def deterministic(monkeypatch):
    monkeypatch.setenv("MEGPHONE_DETERMINISTIC", "1")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = write_config(root / "cfg.yaml", toy_config(root / "run"))
    assert main(["train", str(cfg)]) == 0
    return root


class TestGenerate:
    def test_files_and_counts(self, tmp_path, capsys):
        args = ["generate", "--out", str(tmp_path), "--classes", "39", "--per-class", "4", "--snr", "0.5", "--seed", "7"]
        assert main(args) == 0
        assert (tmp_path / io.WINDOWS_FILE).is_file() and (tmp_path / io.MANIFEST_FILE).is_file()
        with open(tmp_path / io.MANIFEST_FILE) as fh:
            rows = list(csv.DictReader(fh))
        counts = {s: sum(r["split"] == s for r in rows) for s in ("train", "validation", "test")}
        assert counts == {"train": 39 * 4, "validation": 39 * 2, "test": 39 * 2}
        assert "aa" in capsys.readouterr().out

    def test_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert main(["generate", "--out", str(d), "--classes", "3", "--per-class", "2", "--seed", "7"]) == 0
        for name in (io.WINDOWS_FILE, io.MANIFEST_FILE):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    @pytest.mark.parametrize("flags", [["--per-class", "0"], ["--classes", "40"], ["--snr", "-1"], ["--per-class", "x"]])
    def test_usage_errors(self, tmp_path, flags):
        assert main(["generate", "--out", str(tmp_path)] + flags) == 2


class TestTrain:
    def test_outputs(self, trained):
        run = trained / "run"
        for name in ("model.ckpt", "train_log.csv", "config.yaml"):
            assert (run / name).is_file()
        with open(run / "train_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4 and sum(int(r["is_best"]) for r in rows) == 1

    def test_rerun_identical(self, trained, tmp_path):
        # re-run from the provenance copy into a fresh directory
        provenance = yaml.safe_load((trained / "run" / "config.yaml").read_text())
        provenance["output_dir"] = str(tmp_path / "again")
        cfg = write_config(tmp_path / "cfg.yaml", provenance)
        assert main(["train", str(cfg)]) == 0
        first = TrainLog.read_csv(trained / "run" / "train_log.csv")
        second = TrainLog.read_csv(tmp_path / "again" / "train_log.csv")
        assert first.column("val_f1") == second.column("val_f1")
        assert (trained / "run" / "model.ckpt").read_bytes() == (tmp_path / "again" / "model.ckpt").read_bytes()

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", str(tmp_path / "nope.yaml")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_bad_config(self, tmp_path):
        cfg = toy_config(tmp_path)
        cfg["train"]["optimizer"] = "sgd"
        assert main(["train", str(write_config(tmp_path / "c.yaml", cfg))]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_1(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", toy_config(tmp_path / "run", train={"lr": 1e30, "epochs": 2}))
        assert main(["train", str(cfg)]) == 1
        assert (tmp_path / "run" / "model.ckpt").is_file()


class TestEvaluate:
    def test_overfit_train_split(self, trained, tmp_path, capsys):
        args = ["evaluate", "--checkpoint", str(trained / "run" / "model.ckpt"), "--config", str(trained / "cfg.yaml")]
        assert main(args + ["--split", "train", "--ungrouped", "--out", str(tmp_path)]) == 0
        assert "f1_macro 1.0000" in capsys.readouterr().out
        with open(tmp_path / "report_train_ungrouped.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[-1][0] == "macro" and float(rows[-1][3]) == 1.0

    def test_grouped_and_ungrouped_files(self, trained, tmp_path):
        args = ["evaluate", "--checkpoint", str(trained / "run" / "model.ckpt"), "--config", str(trained / "cfg.yaml")]
        assert main(args + ["--split", "test", "--grouped", "--group-size", "2", "--out", str(tmp_path)]) == 0
        assert main(args + ["--split", "test", "--ungrouped", "--out", str(tmp_path)]) == 0
        grouped, ungrouped = tmp_path / "report_test_grouped.csv", tmp_path / "report_test_ungrouped.csv"
        assert grouped.is_file() and ungrouped.is_file()
        support = lambda p: [r[4] for r in csv.reader(open(p))][1:3]  # noqa: E731
        assert support(grouped) == ["2", "2"] and support(ungrouped) == ["5", "5"]
        assert (tmp_path / "command.yaml").is_file()

    def test_missing_checkpoint(self, trained, tmp_path):
        args = ["evaluate", "--checkpoint", str(tmp_path / "none.ckpt"), "--config", str(trained / "cfg.yaml")]
        assert main(args) == 2

    def test_needs_data(self, trained):
        assert main(["evaluate", "--checkpoint", str(trained / "run" / "model.ckpt")]) == 2

    def test_native_data_dir(self, trained, tmp_path):
        data = tmp_path / "data"
        assert main(["generate", "--out", str(data), "--classes", "2", "--per-class", "10", "--snr", "4", "--seed", "1", "--drift", "0"]) == 0
        ckpt = str(trained / "run" / "model.ckpt")
        assert main(["evaluate", "--checkpoint", ckpt, "--data", str(data), "--out", str(tmp_path)]) == 0

    def test_unknown_split(self, trained):
        args = ["evaluate", "--checkpoint", str(trained / "run" / "model.ckpt"), "--config", str(trained / "cfg.yaml")]
        assert main(args + ["--split", "holdout"]) == 2


class TestSaliencyCommands:
    def test_saliency_outputs(self, trained, tmp_path):
        args = ["saliency", "--checkpoint", str(trained / "run" / "model.ckpt"), "--config", str(trained / "cfg.yaml")]
        assert main(args + ["--out", str(tmp_path)]) == 0
        for name in ("saliency_raw.csv", "saliency_normalized.csv", "tree_layers.csv", "tree_phonemes.csv", "clustermap.svg"):
            assert (tmp_path / name).is_file(), name
        root = ET.parse(tmp_path / "clustermap.svg").getroot()
        assert root.tag.endswith("svg")
        header = (tmp_path / "saliency_normalized.csv").read_text().splitlines()[0]
        assert header == "layer,aa,ae"

    def test_similarity_instance_norm(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", toy_config(tmp_path / "run", model={"input_norm": "instance"}))
        assert main(["train", str(cfg)]) == 0
        capsys.readouterr()
        args = ["similarity", "--checkpoint", str(tmp_path / "run" / "model.ckpt"), "--config", str(cfg)]
        assert main(args + ["--out", str(tmp_path / "sim")]) == 0
        lines = capsys.readouterr().out.splitlines()
        means = {line.split(":")[0]: float(line.split()[1]) for line in lines}
        assert means["pearson"] >= 0.999 and means["spearman"] >= 0.999
        assert (tmp_path / "sim" / "summary.txt").read_text().splitlines() == lines
        assert (tmp_path / "sim" / "similarity_spearman.csv").is_file()

    def test_unpaired_splits(self, trained, tmp_path, capsys):
        args = ["similarity", "--checkpoint", str(trained / "run" / "model.ckpt"), "--config", str(trained / "cfg.yaml")]
        assert main(args + ["--split-a", "train", "--split-b", "test", "--out", str(tmp_path)]) == 2
        assert "differ in size" in capsys.readouterr().err


def test_sweep_dry_run(tmp_path):
    cfg = toy_config(tmp_path / "sweep")
    cfg["sweep"] = {"model.input_norm": ["none", "instance"]}
    assert main(["sweep", str(write_config(tmp_path / "c.yaml", cfg)), "--dry-run"]) == 0
    cells = sorted(p.name for p in (tmp_path / "sweep").iterdir())
    assert cells == ["cell-000_input_norm=none", "cell-001_input_norm=instance"]
    saved = yaml.safe_load((tmp_path / "sweep" / cells[1] / "config.yaml").read_text())
    assert saved["model"]["input_norm"] == "instance"


def test_bad_thread_env(monkeypatch, tmp_path):
    monkeypatch.setenv("MEGPHONE_THREADS", "many")
    assert main(["generate", "--out", str(tmp_path), "--classes", "2", "--per-class", "1"]) == 2


def test_no_command():
    assert main([]) == 2


def test_provenance_written(tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--classes", "2", "--per-class", "1"]) == 0
    record = yaml.safe_load((tmp_path / "command.yaml").read_text())
    assert record["command"] == "generate" and record["per_class"] == 1
    np.testing.assert_equal(record["seed"], 7)
