"""Run configuration: one YAML file with model / train / kb / eval sections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import InvalidConfig, IOFailure
from .kb import PromptTemplateConfig
from .losses import LossWeights
from .model import ModelConfig

TRAINABLE_GROUPS = ("prompts", "fusion", "adapter")


@dataclass
class TrainConfig:
    dataset: str | None = None
    layout: str = "mvtec"
    epochs: int = 5
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    trainable: tuple[str, ...] = TRAINABLE_GROUPS
    grad_clip: float = 1.0

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.trainable = tuple(self.trainable)
        unknown = set(self.trainable) - set(TRAINABLE_GROUPS)
        if unknown:
            # encoder weights are frozen by contract and cannot be listed here
            raise InvalidConfig(f"not trainable: {sorted(unknown)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be positive")


@dataclass
class KBConfig:
    templates: PromptTemplateConfig = field(default_factory=PromptTemplateConfig)
    path: str | None = None
    fixtures: str | None = None
    # live client settings (OpenAI-compatible endpoint)
    base_url: str | None = None
    llm_model: str | None = None
    vqa_model: str | None = None
    api_key_env: str = "OPENAI_API_KEY"

    def __post_init__(self):
        if isinstance(self.templates, dict):
            self.templates = PromptTemplateConfig(**self.templates)


@dataclass
class EvalConfig:
    targets: tuple[str, ...] = ()
    layout: str = "mvtec"
    pixel_pooling: str = "pooled"  # pooled | per_image
    image_auc_mode: str = "class_mean"  # class_mean | pooled

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.pixel_pooling not in ("pooled", "per_image"):
            raise InvalidConfig(f"unknown pixel_pooling {self.pixel_pooling!r}")
        if self.image_auc_mode not in ("class_mean", "pooled"):
            raise InvalidConfig(f"unknown image_auc_mode {self.image_auc_mode!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    kb: KBConfig = field(default_factory=KBConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        for name, cls in (("model", ModelConfig), ("train", TrainConfig),
                          ("kb", KBConfig), ("eval", EvalConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, _build(cls, value))

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        unknown = set(data) - {"model", "train", "kb", "eval"}
        if unknown:
            raise InvalidConfig(f"unknown config sections {sorted(unknown)}")
        return _build(cls, data)


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InvalidConfig(f"unknown {cls.__name__} keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


def _plain(obj: Any):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"malformed config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise InvalidConfig("config file must be a mapping")
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))


def config_hash(config: RunConfig | dict) -> str:
    data = config.to_dict() if isinstance(config, RunConfig) else config
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()
