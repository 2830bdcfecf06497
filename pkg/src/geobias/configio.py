"""Dict <-> dataclass converters for the configs that cross file formats
(checkpoints, run-config files). JSON turns tuples into lists; these
helpers normalize them back."""

from __future__ import annotations

from dataclasses import asdict, fields

from .featurizer import FeaturizerConfig
from .geometry import EmbeddingConfig
from .model import ModelConfig
from .scenegen import SceneConfig


def model_cfg_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def model_cfg_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)


def feat_cfg_to_dict(cfg: FeaturizerConfig) -> dict:
    return asdict(cfg)


def feat_cfg_from_dict(d: dict) -> FeaturizerConfig:
    d = dict(d)
    d["embed"] = EmbeddingConfig(**d["embed"])
    return FeaturizerConfig(**d)


def scene_cfg_to_dict(cfg: SceneConfig) -> dict:
    return asdict(cfg)


def scene_cfg_from_dict(d: dict) -> SceneConfig:
    d = dict(d)
    for f in fields(SceneConfig):
        if f.name in d and isinstance(d[f.name], list):
            d[f.name] = tuple(d[f.name])
    return SceneConfig(**d)
