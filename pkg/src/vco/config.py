"""Declarative experiment configuration.

A RunConfig fully describes one experiment: dataset spec, frozen teacher,
model, training, sampling, and evaluation settings plus seed and output
directory. Configs are plain JSON with exactly these keys; unknown keys are
rejected, and omitted sections fall back to the documented defaults. CLI
flags override file values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from . import structconf
from .data import DatasetSpec
from .losses import LossWeights  # noqa: F401  (re-exported for config users)
from .model import ModelConfig
from .sampler import SamplerConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class TeacherSpec:
    patch_size: int = 4
    in_channels: int = 1
    feature_dim: int = 8
    seed: int = 1234


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 256
    cfg_sweep: tuple[float, ...] = (1.0, 1.5, 2.0, 3.0)
    sample_batch: int = 128
    weights: str = "final"  # "final" or "ema:<decay>", e.g. "ema:0.9996"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/experiment"
    data: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def validate(cfg: RunConfig) -> None:
    """Cross-section consistency; individual sections validate themselves."""
    if cfg.model.image_height != cfg.data.height or \
            cfg.model.image_width != cfg.data.width:
        raise ValueError("model image dims must match the dataset dims")
    if cfg.model.image_channels != cfg.data.channels:
        raise ValueError("model channels must match the dataset channels")
    if cfg.model.n_classes != cfg.data.n_classes:
        raise ValueError("model n_classes must match the dataset classes")
    if cfg.model.has_semantic:
        if cfg.teacher.patch_size != cfg.model.patch_size:
            raise ValueError("teacher and model patch sizes must agree "
                             "(token-wise fusion needs matching grids)")
        if cfg.teacher.feature_dim != cfg.model.feature_dim:
            raise ValueError("teacher and model feature dims must agree")
    if cfg.teacher.in_channels != cfg.data.channels:
        raise ValueError("teacher channels must match the dataset channels")
    if cfg.data.height % cfg.model.patch_size or \
            cfg.data.width % cfg.model.patch_size:
        raise ValueError("dataset dims must be divisible by the patch size")


def from_dict(data: dict) -> RunConfig:
    cfg = structconf.from_dict(RunConfig, data)
    validate(cfg)
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    return structconf.to_dict(cfg)


def load(path) -> RunConfig:
    with open(path) as fh:
        return from_dict(json.load(fh))


def override(cfg: RunConfig, **top_level) -> RunConfig:
    """Replace top-level fields (seed, out_dir, ...) and re-validate."""
    out = replace(cfg, **{k: v for k, v in top_level.items() if v is not None})
    validate(out)
    return out
