"""TOML pipeline configuration.

Every section and key is optional; anything not listed here is rejected.
Relative paths are resolved against the directory of the config file.

    [data]
    train = "train.csv"          # path,label manifest of .lmel or .wav files
    val = "val.csv"
    labels = [...]               # class vocabulary; default: the 10 scene labels

    [features]
    window_ms = 40
    hop_ms = 20
    n_mels = 40

    [model]
    architecture = "16-16-32-100"  # C1-C2-C3-dense widths
    kernel = 3
    activations = "TRTT"         # C1, C2, C3, dense; T = tanh, R = ReLU

    [train]
    batch_size = 64
    max_epochs = 1000
    lr = 0.001
    beta1 = 0.9
    beta2 = 0.999
    epsilon = 1e-8
    patience = 20
    bn_momentum = 0.99
    seeds = [0]
    shuffle_seed = 0

    [prune]                      # filters to remove per conv layer
    C1 = 0
    C2 = 0
    C3 = 0

    [quantize]
    enabled = false

    [ensemble]
    members = []                 # model files, in ensemble order
    threshold = 1e4              # aggregated-MSE bound for map sharing
    layers = ["C1"]
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .features import N_MELS
from .io import SCENE_LABELS
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train: Path | None = None
    val: Path | None = None
    labels: tuple[str, ...] = SCENE_LABELS


@dataclass
class FeatureConfig:
    window_ms: float = 40
    hop_ms: float = 20
    n_mels: int = N_MELS


@dataclass
class ModelConfig:
    architecture: str = "16-16-32-100"
    kernel: int = 3
    activations: str = "TRTT"


@dataclass
class QuantizeConfig:
    enabled: bool = False


@dataclass
class EnsembleConfig:
    members: list[Path] = field(default_factory=list)
    threshold: float = 1e4
    layers: list[str] = field(default_factory=lambda: ["C1"])


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: dict[str, int] = field(default_factory=dict)
    quantize: QuantizeConfig = field(default_factory=QuantizeConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)


_SECTIONS = {"data": DataConfig, "features": FeatureConfig, "model": ModelConfig, "train": TrainConfig,
             "quantize": QuantizeConfig, "ensemble": EnsembleConfig}
_PRUNE_KEYS = ("C1", "C2", "C3")


def _section(name: str, cls, values, base: Path):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{name}] unknown key(s): {', '.join(unknown)}")
    values = dict(values)
    for key in ("train", "val"):
        if name == "data" and values.get(key) is not None:
            values[key] = base / values[key]
    if name == "data" and "labels" in values:
        values["labels"] = tuple(values["labels"])
    if name == "ensemble" and "members" in values:
        values["members"] = [base / p for p in values["members"]]
    if name == "train" and "seeds" in values:
        values["seeds"] = tuple(values["seeds"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def parse_config(text: str, base_dir=".") -> PipelineConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    base = Path(base_dir)
    unknown = sorted(set(raw) - set(_SECTIONS) - {"prune"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    cfg = PipelineConfig()
    for name, cls in _SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _section(name, cls, raw[name], base))
    prune = raw.get("prune", {})
    bad = sorted(set(prune) - set(_PRUNE_KEYS))
    if bad:
        raise ConfigError(f"[prune] unknown key(s): {', '.join(bad)}")
    if any(not isinstance(v, int) or v < 0 for v in prune.values()):
        raise ConfigError("[prune] counts must be non-negative integers")
    cfg.prune = dict(prune)
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    return parse_config(path.read_text(), path.parent)
