"""Experiment configuration files (YAML) with strict key checking.

Every section has defaults matching the reference training recipe, so an
empty file describes the baseline cell. Unknown keys are rejected at every
level.
"""

from __future__ import annotations

import copy
import dataclasses
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml

from .augment import AugmentConfig
from .errors import ConfigurationError, UsageError
from .models import ModelSpec
from .sampling import SamplingPlan
from .training import TrainConfig

CONFIG_FILE = "config.yaml"


@dataclass
class SyntheticSource:
    n_per_class: int = 200
    snr: float = 0.01
    seed: int = 7
    n_classes: int = 39
    eval_per_class: Optional[int] = None
    drift: float = 0.5


@dataclass
class DataSource:
    path: Optional[str] = None
    synthetic: Optional[SyntheticSource] = None

    def validate(self) -> "DataSource":
        if (self.path is None) == (self.synthetic is None):
            raise ConfigurationError("data needs exactly one of 'path' or 'synthetic'")
        return self


@dataclass
class ExperimentConfig:
    data: DataSource = field(default_factory=lambda: DataSource(synthetic=SyntheticSource()))
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "run"
    sweep: Dict[str, list] = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        self.data.validate()
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)


# -- generic dataclass <-> dict ---------------------------------------------------------------

_NESTED = {
    (ExperimentConfig, "data"): DataSource,
    (ExperimentConfig, "model"): ModelSpec,
    (ExperimentConfig, "train"): TrainConfig,
    (DataSource, "synthetic"): SyntheticSource,
    (TrainConfig, "sampling"): SamplingPlan,
    (TrainConfig, "augment"): AugmentConfig,
}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _coerce(value, default, where):
    # YAML 1.1 reads "1e-4" as a string; accept numeric strings for numeric fields
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be true or false")
        return value
    if isinstance(default, float) or (default is None and isinstance(value, str) and _is_number(value)):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{where} must be a number, got {value!r}") from None
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigurationError(f"{where} must be a list of {len(default)} numbers")
        return tuple(_coerce(v, d, where) for v, d in zip(value, default))
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"{where} must be a string, got {value!r}")
    return value


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _from_plain(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown keys in {where or 'config'}: {unknown}")
    defaults = cls()
    kwargs = {}
    for name, value in raw.items():
        key = f"{where}.{name}" if where else name
        nested = _NESTED.get((cls, name))
        if nested is not None:
            kwargs[name] = None if value is None and name == "synthetic" else _from_plain(nested, value, key)
        elif isinstance(getattr(defaults, name), dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{key} must be a mapping")
            kwargs[name] = dict(value)
        else:
            kwargs[name] = _coerce(value, getattr(defaults, name), key)
    return cls(**kwargs)


def parse_config(raw: Any) -> ExperimentConfig:
    return _from_plain(ExperimentConfig, raw, "").validate()


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML: {exc}") from exc
    return parse_config(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: ExperimentConfig, directory: Union[str, Path]) -> Path:
    path = Path(directory) / CONFIG_FILE
    path.write_text(dump_config(cfg))
    return path


# -- sweeps -----------------------------------------------------------------------------------


def _set_dotted(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigurationError(f"sweep key {dotted!r} does not address a section")
    d[keys[-1]] = value


def expand_sweep(cfg: ExperimentConfig) -> List[Tuple[str, ExperimentConfig]]:
    """Cartesian product of the ``sweep`` axes, one config per cell.

    Each cell writes below ``<output_dir>/<cell name>``.
    """
    if not cfg.sweep:
        return [("cell-000", cfg)]
    axes = list(cfg.sweep.items())
    for key, values in axes:
        if not isinstance(values, list) or not values:
            raise ConfigurationError(f"sweep axis {key!r} must be a non-empty list")
    base = cfg.to_dict()
    base["sweep"] = {}
    cells = []
    for i, combo in enumerate(itertools.product(*(v for _, v in axes))):
        raw = copy.deepcopy(base)
        parts = []
        for (key, _), value in zip(axes, combo):
            _set_dotted(raw, key, value)
            parts.append(f"{key.split('.')[-1]}={value}")
        name = f"cell-{i:03d}_" + "_".join(parts)
        raw["output_dir"] = str(Path(cfg.output_dir) / name)
        cells.append((name, parse_config(raw)))
    return cells
