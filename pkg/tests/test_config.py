import pytest
import yaml

from megphone.config import (
    ExperimentConfig,
    dump_config,
    expand_sweep,
    load_config,
    parse_config,
    save_config,
)
from megphone.errors import ConfigurationError, UsageError


def test_empty_config_is_baseline():
    cfg = parse_config({})
    assert cfg.train.lr == 1e-4 and cfg.train.weight_decay == 1e-2 and cfg.train.epochs == 10
    assert cfg.train.sampling.group_size == 100 and cfg.train.sampling.balance
    assert cfg.train.augment.p_apply == 0.3
    assert cfg.model.arch == "resnet_cnn" and cfg.model.hidden_dim == 32
    assert cfg.data.synthetic is not None and cfg.data.path is None


def test_yaml_exponent_strings_coerced(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  lr: 1e-3\n  weight_decay: 0\n")
    cfg = load_config(path)
    assert cfg.train.lr == 1e-3 and isinstance(cfg.train.weight_decay, float)


@pytest.mark.parametrize(
    "raw",
    [
        {"trian": {}},
        {"train": {"learning_rate": 1e-3}},
        {"train": {"sampling": {"groupsize": 5}}},
        {"model": {"arch": "vit"}},
        {"train": {"epochs": "ten"}},
        {"train": {"eval_grouped": "yes"}},
        {"data": {"path": "x", "synthetic": {}}},
        {"train": {"augment": {"amp_range": [1.0]}}},
        ["not", "a", "mapping"],
    ],
)
def test_rejected(raw):
    with pytest.raises(ConfigurationError):
        parse_config(raw)


def test_missing_file(tmp_path):
    with pytest.raises(UsageError):
        load_config(tmp_path / "absent.yaml")


def test_invalid_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("train: [unclosed\n")
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_round_trip(tmp_path):
    cfg = parse_config(
        {
            "data": {"synthetic": {"n_per_class": 5, "snr": 0.5}},
            "model": {"arch": "cnn_transformer", "input_norm": "instance", "block_norm": "layer"},
            "train": {"lr": 3e-4, "sampling": {"group_size": 10, "repeats": 3}, "augment": {"p_overrides": {"band": 0.0}}},
            "output_dir": "out/x",
        }
    )
    save_config(cfg, tmp_path)
    again = load_config(tmp_path / "config.yaml")
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


def test_path_source():
    cfg = parse_config({"data": {"path": "/tmp/ds", "synthetic": None}})
    assert cfg.data.path == "/tmp/ds" and cfg.data.synthetic is None


def test_sweep_cells(tmp_path):
    cfg = parse_config(
        {
            "output_dir": str(tmp_path),
            "sweep": {"model.input_norm": ["none", "instance"], "train.sampling.repeats": [1, 5]},
        }
    )
    cells = expand_sweep(cfg)
    assert len(cells) == 4
    combos = {(c.model.input_norm, c.train.sampling.repeats) for _, c in cells}
    assert combos == {("none", 1), ("none", 5), ("instance", 1), ("instance", 5)}
    names = [n for n, _ in cells]
    assert len(set(names)) == 4 and names[0] == "cell-000_input_norm=none_repeats=1"
    assert all(c.sweep == {} and c.output_dir.startswith(str(tmp_path)) for _, c in cells)


def test_sweep_bad_axis():
    with pytest.raises(ConfigurationError):
        expand_sweep(parse_config({"sweep": {"model.hidden_dim": []}}))
    with pytest.raises(ConfigurationError):
        expand_sweep(parse_config({"sweep": {"model.depth": [1, 2]}}))


def test_no_sweep_single_cell():
    cfg = ExperimentConfig()
    assert expand_sweep(cfg) == [("cell-000", cfg)]


def test_dump_is_plain_yaml():
    text = dump_config(parse_config({}))
    assert set(yaml.safe_load(text)) == {"data", "model", "train", "output_dir", "sweep"}
