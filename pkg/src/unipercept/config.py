"""Run configuration: YAML file with nested sections, loaded into dataclasses."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .datamodel import LOSS_NAMES, DatasetDescriptor, Granularity, default_loss_mask
from .decoder import ModelConfig
from .losses import LossWeights
from .synthetic import SyntheticSceneSpec

TASKS = ("detection", "grounding", "class_agnostic", "video", "prompt")
STAGES = ("pretrain", "joint")
DETECTION_LOSSES = frozenset({"semantic", "box", "mask"})


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    backbone_lr_mult: float = 0.1
    text_lr_mult: float = 0.1
    steps: int = 2000
    decay_at: float = 0.8  # fraction of steps
    decay_factor: float = 0.1
    batch_size: int = 4
    grad_clip: float = 0.1


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    task: str = "detection"
    sampling_ratio: float = 1.0
    # source: synthetic generation or a unified annotation file
    synthetic: Optional[SyntheticSceneSpec] = None
    seed: int = 0
    count: int = 16
    path: Optional[str] = None
    loss_mask: Optional[frozenset] = None
    category_pad: int = 100
    max_gap: int = 5

    def granularity(self) -> Granularity:
        s = self.synthetic or SyntheticSceneSpec()
        return Granularity(
            has_box=True,
            has_mask=s.with_mask,
            has_category=s.label == "category",
            has_expression=s.label == "expression",
            has_track=self.task == "video",
            class_agnostic=s.label == "agnostic",
        )

    def descriptor(self, granularity: Optional[Granularity] = None) -> DatasetDescriptor:
        g = granularity or self.granularity()
        mask = self.loss_mask if self.loss_mask is not None else default_loss_mask(g, prompted=self.task == "prompt")
        return DatasetDescriptor(self.name, g, self.sampling_ratio, frozenset(mask))


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    datasets: tuple = ()
    seed: int = 0
    stage: str = "joint"
    teacher_seed: int = 0
    log_every: int = 1

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if not self.datasets:
            raise ConfigError("no datasets configured")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")
        for d in self.datasets:
            if d.task not in TASKS:
                raise ConfigError(f"{d.name}: task must be one of {TASKS}")
            if d.synthetic is None and d.path is None:
                raise ConfigError(f"{d.name}: needs a synthetic spec or a path")
            if d.loss_mask is not None:
                unknown = set(d.loss_mask) - set(LOSS_NAMES)
                if unknown:
                    raise ConfigError(f"{d.name}: unknown losses {sorted(unknown)}")
            if d.sampling_ratio < 0:
                raise ConfigError(f"{d.name}: negative sampling ratio")
            if d.synthetic is not None:
                bad = d.descriptor().loss_mask_violations()
                if bad:
                    raise ConfigError(f"{d.name}: {'; '.join(bad)}")

    def effective_loss_mask(self, descriptor: DatasetDescriptor) -> frozenset:
        """Stage 1 keeps only detection losses with the text side frozen."""
        if self.stage == "pretrain":
            return frozenset(descriptor.loss_mask & DETECTION_LOSSES)
        return descriptor.loss_mask

    def model_hash(self) -> str:
        payload = {"model": dataclasses.asdict(self.model), "teacher_seed": self.teacher_seed}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, data: dict):
    if data is None:
        return cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kw = dict(data)
    for key in ("backbone_widths", "shapes", "size_range", "objects_per_image"):
        if key in kw and isinstance(kw[key], list):
            kw[key] = tuple(kw[key])
    if isinstance(kw.get("colors"), dict):
        kw["colors"] = {k: tuple(v) for k, v in kw["colors"].items()}
    return cls(**kw)


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d or {})
    datasets = []
    for item in d.pop("datasets", []) or []:
        item = dict(item)
        syn = item.pop("synthetic", None)
        if syn is not None:
            item["synthetic"] = _build(SyntheticSceneSpec, syn)
        if item.get("loss_mask") is not None:
            item["loss_mask"] = frozenset(item["loss_mask"])
        datasets.append(_build(DatasetConfig, item))
    cfg = RunConfig(
        model=_build(ModelConfig, d.pop("model", None)),
        loss_weights=_build(LossWeights, d.pop("loss_weights", None)),
        optim=_build(OptimConfig, d.pop("optim", None)),
        datasets=tuple(datasets),
        **d,
    )
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    def conv(x):
        if dataclasses.is_dataclass(x):
            return {f.name: conv(getattr(x, f.name)) for f in dataclasses.fields(x)}
        if isinstance(x, (tuple, list)):
            return [conv(v) for v in x]
        if isinstance(x, frozenset):
            return sorted(x)
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        return x

    return conv(cfg)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    cfg = config_from_dict(data)
    base = Path(path).parent
    fixed = []
    for ds in cfg.datasets:
        if ds.path is not None and not Path(ds.path).is_absolute():
            ds = dataclasses.replace(ds, path=str(base / ds.path))
        fixed.append(ds)
    return dataclasses.replace(cfg, datasets=tuple(fixed))


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
