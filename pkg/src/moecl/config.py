"""Run configuration: a single JSON file with full-snapshot semantics.

A config file carries every knob; command-line flags override individual
values; the effective merged config is written into the run directory so a
run can always be reproduced from its own snapshot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, fields

from .backbone import Geometry
from .errors import DataError
from .trainer import DdasConfig, MoeConfig, TrainConfig


@dataclass
class StreamConfig:
    num_tasks: int = 5
    classes_per_task: int = 4
    train_per_class: int = 100
    eval_per_class: int = 50
    dim: int = 32
    patches: int = 16
    separation: float = 6.0


@dataclass
class PretrainConfig:
    steps: int = 400
    reference_size: int = 1024
    reference_classes: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    backbone_checkpoint: str = ""  # written by pretrain, read by run/sweep
    geometry: Geometry = field(default_factory=Geometry)
    stream: StreamConfig = field(default_factory=StreamConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    moe: MoeConfig = field(default_factory=MoeConfig)
    ddas: DdasConfig = field(default_factory=DdasConfig)

    def to_json(self):
        d = asdict(self)
        d["train"]["betas"] = list(d["train"]["betas"])
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


_SECTIONS = {
    "geometry": Geometry,
    "stream": StreamConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "moe": MoeConfig,
    "ddas": DdasConfig,
}


def _build_section(cls, values):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise DataError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    if cls is TrainConfig and "betas" in values:
        values = dict(values, betas=tuple(values["betas"]))
    return cls(**values)


def from_dict(d):
    cfg = RunConfig()
    for key, value in d.items():
        if key in _SECTIONS:
            setattr(cfg, key, _build_section(_SECTIONS[key], value))
        elif key in ("seed", "out", "backbone_checkpoint"):
            setattr(cfg, key, value)
        else:
            raise DataError(f"unknown config key {key!r}")
    return cfg


def load(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return from_dict(json.load(fh))
    except FileNotFoundError:
        raise DataError(f"config file not found: {path!r}")
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path!r} is not valid JSON: {exc}")


def apply_overrides(cfg, overrides):
    """Apply dotted-path overrides, e.g. {"train.lr": 5e-4, "seed": 1}."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        if "." in dotted:
            section, name = dotted.split(".", 1)
            target = getattr(cfg, section, None)
            if target is None or not hasattr(target, name):
                raise DataError(f"unknown config override {dotted!r}")
            setattr(target, name, value)
        else:
            if not hasattr(cfg, dotted):
                raise DataError(f"unknown config override {dotted!r}")
            setattr(cfg, dotted, value)
    return cfg
