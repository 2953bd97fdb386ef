"""Run configuration and its flat ``section.key = value`` text form.

Every key has a default. Unknown keys are errors. ``train.preset`` names a
bundle of values applied before the file's explicit keys, so explicit keys win.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .losses import DiversityLossParams, MetricLossParams
from .model import ModelConfig


@dataclass(frozen=True)
class DataSection:
    dir: str = ""  # empty: generate synthetic data in memory
    classes: int = 40
    per_class: int = 64
    image_size: int = 32
    channels: int = 1
    contrast: float = 0.3
    seed: int = 0
    train_fraction: float = 0.5
    augment: bool = False


@dataclass(frozen=True)
class ModelSection:
    grouping: str = "A"
    groups: int = 4
    key_dim: int = 16
    value_dim: int = 32
    widths: tuple = (8, 16, 32, 64)
    normalize: bool = True


@dataclass(frozen=True)
class LossSection:
    kind: str = "margin"
    margin: Optional[float] = None  # None: per-kind default
    alpha: float = 2.0
    beta0: float = 1.0
    beta1: float = 25.0
    eta: float = 1.2
    lr_eta: float = 5e-4
    div_margin: float = 0.5
    div_alpha: float = 2.0
    div_beta0: float = 1.0
    lambda1: float = 0.02
    lambda2: float = 1e-4


@dataclass(frozen=True)
class OptimSection:
    preset: str = "none"
    lr: float = 1e-3
    epochs: int = 30
    classes_per_batch: int = 8
    samples_per_class: int = 4
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip: float = 0.0  # global gradient-norm clip; 0 disables


@dataclass(frozen=True)
class EvalSection:
    k: tuple = (1, 2, 4, 8)
    seed: int = 0
    batch: int = 128


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "loss": LossSection,
    "train": OptimSection,
    "eval": EvalSection,
}

PRESETS = {
    "none": {},
    "section-4.2": {"loss.kind": "margin", "loss.lambda1": "0.02", "loss.lambda2": "0.003",
                    "model.groups": "3", "model.value_dim": "170"},
    "section-4.3": {"loss.lambda1": "0.01", "loss.lambda2": "0.001",
                    "model.groups": "4", "model.value_dim": "128"},
}


@dataclass(frozen=True)
class TrainConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: OptimSection = field(default_factory=OptimSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        self.model_config()
        self.metric_params()
        if self.loss.lambda1 < 0 or self.loss.lambda2 < 0:
            raise ConfigError("loss.lambda1 and loss.lambda2 must be non-negative")
        if self.train.epochs < 0 or self.train.lr < 0 or self.loss.lr_eta < 0:
            raise ConfigError("train.epochs, train.lr and loss.lr_eta must be non-negative")
        if self.train.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.train.preset!r}; choose from {sorted(PRESETS)}")

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(m.grouping, m.groups, m.key_dim, m.value_dim, tuple(m.widths),
                           self.data.image_size, self.data.channels, m.normalize)

    def metric_params(self) -> MetricLossParams:
        base = MetricLossParams.defaults(self.loss.kind)
        margin = base.margin if self.loss.margin is None else self.loss.margin
        return MetricLossParams(self.loss.kind, margin, self.loss.alpha, self.loss.beta0, self.loss.beta1,
                                self.loss.eta, self.loss.lr_eta)

    def diversity_params(self) -> DiversityLossParams:
        return DiversityLossParams(self.loss.div_margin, self.loss.div_alpha, self.loss.div_beta0)

    def replace(self, **overrides) -> "TrainConfig":
        """``cfg.replace(**{"model.groups": 1})``-style overrides with typed values."""
        sections = {name: getattr(self, name) for name in SECTIONS}
        grouped: dict = {}
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
                raise ConfigError(f"unknown config key {key!r}")
            grouped.setdefault(section, {})[name] = value
        for section, values in grouped.items():
            sections[section] = dataclasses.replace(sections[section], **values)
        return TrainConfig(**sections)

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            for f in dataclasses.fields(SECTIONS[name]):
                lines.append(f"{name}.{f.name} = {_format(getattr(getattr(self, name), f.name))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key == "loss.margin":
            return None if raw.lower() == "auto" else float(raw)
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_pairs(text: str, source: str = "<config>") -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def config_from_pairs(pairs: dict) -> TrainConfig:
    defaults = TrainConfig()
    merged = dict(PRESETS.get(pairs.get("train.preset", "none").strip(), {}))
    merged.update(pairs)
    typed = {}
    for key, raw in merged.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not hasattr(getattr(defaults, section), name):
            raise ConfigError(f"unknown config key {key!r}")
        typed[key] = _parse(key, raw, getattr(getattr(defaults, section), name))
    return defaults.replace(**typed)


def load_config(path) -> TrainConfig:
    path = Path(path)
    return config_from_pairs(parse_pairs(path.read_text(), str(path)))
