"""The composite run configuration and the ablation presets.

Serialized as JSON with sorted keys; `parse(serialize(cfg))` is the
identity, and serialization of a parsed file is canonical regardless of
the input's key order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from . import configio
from .featurizer import (
    ASSEMBLY_CHANNEL,
    CAMERA_CENTER_RAY,
    CAMERA_NONE,
    EPIPOLAR_ANGLE,
    EPIPOLAR_NONE,
    EPIPOLAR_NORMAL,
    FeaturizerConfig,
)
from .localization import LocalizerConfig
from .model import ModelConfig
from .scenegen import SceneConfig
from .training import TrainConfig

#: Featurizer setups mirroring the embedding ablation rows, plus "normal"
#: (the localization-compatible variant of "both").
PRESETS = {
    "none": FeaturizerConfig(camera=CAMERA_NONE, epipolar=EPIPOLAR_NONE),
    "camera": FeaturizerConfig(camera=CAMERA_CENTER_RAY, assembly=ASSEMBLY_CHANNEL, epipolar=EPIPOLAR_NONE),
    "epipolar": FeaturizerConfig(camera=CAMERA_NONE, epipolar=EPIPOLAR_ANGLE),
    "both": FeaturizerConfig(camera=CAMERA_CENTER_RAY, assembly=ASSEMBLY_CHANNEL, epipolar=EPIPOLAR_ANGLE),
    "normal": FeaturizerConfig(camera=CAMERA_CENTER_RAY, assembly=ASSEMBLY_CHANNEL, epipolar=EPIPOLAR_NORMAL),
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)

    def with_preset(self, name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return replace(self, featurizer=replace(PRESETS[name], d_rgb=self.featurizer.d_rgb))


def serialize(cfg: RunConfig) -> str:
    doc = {
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "model": configio.model_cfg_to_dict(cfg.model),
        "featurizer": configio.feat_cfg_to_dict(cfg.featurizer),
        "train": asdict(cfg.train),
        "scene": configio.scene_cfg_to_dict(cfg.scene),
        "localizer": asdict(cfg.localizer),
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def parse(text: str) -> RunConfig:
    doc = json.loads(text)
    base = RunConfig()
    return RunConfig(
        seed=doc.get("seed", base.seed),
        out_dir=doc.get("out_dir", base.out_dir),
        model=configio.model_cfg_from_dict(doc["model"]) if "model" in doc else base.model,
        featurizer=configio.feat_cfg_from_dict(doc["featurizer"]) if "featurizer" in doc else base.featurizer,
        train=TrainConfig(**doc["train"]) if "train" in doc else base.train,
        scene=configio.scene_cfg_from_dict(doc["scene"]) if "scene" in doc else base.scene,
        localizer=LocalizerConfig(**doc["localizer"]) if "localizer" in doc else base.localizer,
    )


def load(path) -> RunConfig:
    with open(path) as f:
        return parse(f.read())
