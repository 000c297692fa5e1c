"""Run configuration: every tunable with its default, loadable from YAML."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .datagen import DatagenConfig
from .pf import PfConfig
from .pipeline import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    K: int = 1000
    beta_start: float = 1e-6
    beta_end: float = 1e-3
    n_ddim: int = 10


@dataclass
class ModelConfig:
    width: int = 128
    width_mid: int = 64
    global_width: int = 128
    hist_width: int = 64
    sdf_width: int = 64
    n_freq: int = 8
    wrench_scale: float = 10.0
    x0_clip: float = 2.5
    classifier_width: int = 256
    classifier_depth: int = 3


@dataclass
class EvalConfig:
    max_windows: int = 2000  # eval windows used for the per-state tables (0 = all)
    with_qp: bool = True
    qp_windows: int = 300  # windows per state that get the QP decomposition
    history_scenarios: int = 500
    batch_size: int = 256
    timing_windows: int = 20
    plots: int = 4


@dataclass
class PfRunConfig:
    trials: int = 100
    steps: int = 25
    start_ms: int = 60
    every_ms: int = 5
    pf: PfConfig = field(default_factory=PfConfig)


@dataclass
class RunConfig:
    robot: str = "planar3"
    seed: int = 0
    data: DatagenConfig = field(default_factory=DatagenConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    pf: PfRunConfig = field(default_factory=PfRunConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, doc, where: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    default = cls()
    for name, value in doc.items():
        current = getattr(default, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(current):
                raise ConfigError(f"{where}.{name}: expected a list of {len(current)} values")
            kwargs[name] = tuple(value)
        else:
            if isinstance(current, bool) and not isinstance(value, bool):
                raise ConfigError(f"{where}.{name}: expected true/false")
            if isinstance(current, (int, float)) and not isinstance(current, bool):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{where}.{name}: expected a number")
                if isinstance(current, int) and not isinstance(value, int):
                    raise ConfigError(f"{where}.{name}: expected an integer")
                value = float(value) if isinstance(current, float) else value
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(doc: dict | None) -> RunConfig:
    return _build(RunConfig, doc or {}, "config")


def load_config(path) -> RunConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc)
