"""Run configuration: a JSON document with scene/model/train/eval/paths
sections.  Unknown keys are rejected, and parse -> serialize -> parse is
a fixpoint; every run writes its fully resolved config next to its
outputs."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .blocks import ATTENTION_KINDS
from .losses import LossWeights

__all__ = ["RunConfig", "SceneSection", "ModelSection", "TrainSection",
           "EvalSection", "PathsSection", "ConfigError", "load_config",
           "dump_config"]


class ConfigError(ValueError):
    pass


@dataclass
class SceneSection:
    resolution: int = 64
    bump_count: int = 5
    albedo_regions: int = 6
    shadows_enabled: bool = True
    ambient: float = 0.05
    z_gain: float = 1.0
    albedo_noise: float = 0.02
    n_train_scenes: int = 200
    n_val_scenes: int = 40
    from_direction: int = 1
    from_color: int = 4
    to_direction: int = 5
    to_color: int = 1
    guides_per_sample: int = 3


@dataclass
class ModelSection:
    variant: str = "one_to_one"
    scale_divisor: int = 8
    attention_kind: str = "squeeze_excitation"
    growth_pairs: int = 6
    se_reduction: int = 16
    no_normals: bool = False
    no_lighting_loss: bool = False
    no_multiscale: bool = False

    def __post_init__(self):
        if self.variant not in ("one_to_one", "any_to_any"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention_kind {self.attention_kind!r}")


@dataclass
class TrainSection:
    initial_lr: float = 1e-4
    decay_factor: float = 0.7
    epochs: int = 25
    batch_size: int = 8
    patch: Optional[int] = None
    lam_iid: float = 0.4
    lam_direct: float = 0.4
    lam_ssim: float = 0.8
    lam_lighting: float = 0.03
    estimator_epochs: int = 3
    estimator_scenes: int = 40

    def weights(self) -> LossWeights:
        return LossWeights(self.lam_iid, self.lam_direct, self.lam_ssim,
                           self.lam_lighting)


@dataclass
class EvalSection:
    protocol: str = "plain"

    def __post_init__(self):
        if self.protocol not in ("plain", "ensemble"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")


@dataclass
class PathsSection:
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None
    estimator: Optional[str] = None


@dataclass
class RunConfig:
    seed: int = 7
    scene: SceneSection = field(default_factory=SceneSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)


_SECTIONS = {"scene": SceneSection, "model": ModelSection, "train": TrainSection,
             "eval": EvalSection, "paths": PathsSection}


def _build(cls, payload: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(payload) - names
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"bad {where} section: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    extra = set(doc) - (set(_SECTIONS) | {"seed"})
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    kwargs = {"seed": int(doc.get("seed", 7))}
    for name, cls in _SECTIONS.items():
        payload = doc.get(name, {})
        if not isinstance(payload, dict):
            raise ConfigError(f"section {name!r} must be an object")
        kwargs[name] = _build(cls, payload, name)
    return RunConfig(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "seed": cfg.seed,
        **{name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS},
    }


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n",
        encoding="utf-8")
