"""Experiment configuration objects and their validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; ``fields`` names the offenders."""

    def __init__(self, message: str, fields: tuple[str, ...] = ()):
        super().__init__(message)
        self.fields = fields


@dataclass
class ArchConfig:
    input_hw: int = 64
    stem_channels: int = 16
    levels: list[tuple[int, int]] = field(default_factory=lambda: [(16, 1), (32, 1), (64, 1)])
    bottleneck_channels: int = 128
    num_seg_classes: int = 6
    num_grades: int = 5
    clf_head_blocks: int = 1
    # concat | add | none
    pag_fusion: str = "concat"

    def __post_init__(self):
        self.levels = [tuple(int(v) for v in lv) for lv in self.levels]

    def validate(self) -> None:
        if not self.levels:
            raise ConfigError("arch.levels must contain at least one level", ("arch.levels",))
        widths = [self.stem_channels, self.bottleneck_channels] + [c for c, _ in self.levels]
        for c in widths:
            if c <= 0 or c % 4:
                raise ConfigError(f"channel count {c} is not a positive multiple of 4", ("arch.levels",))
        if self.stem_channels != self.levels[0][0]:
            raise ConfigError(
                f"arch.stem_channels={self.stem_channels} must equal first level width {self.levels[0][0]}",
                ("arch.stem_channels", "arch.levels"),
            )
        if any(b < 1 for _, b in self.levels):
            raise ConfigError("blocks per level must be >= 1", ("arch.levels",))
        factor = 2 ** len(self.levels)
        if self.input_hw <= 0 or self.input_hw % factor:
            raise ConfigError(
                f"arch.input_hw={self.input_hw} not divisible by 2^{len(self.levels)}", ("arch.input_hw",)
            )
        if self.num_seg_classes < 2 or self.num_grades < 2:
            raise ConfigError("need at least two classes per head", ("arch.num_seg_classes", "arch.num_grades"))
        if self.clf_head_blocks < 0:
            raise ConfigError("arch.clf_head_blocks must be >= 0", ("arch.clf_head_blocks",))
        if self.pag_fusion not in ("concat", "add", "none"):
            raise ConfigError(f"unknown arch.pag_fusion {self.pag_fusion!r}", ("arch.pag_fusion",))


MODES = ("joint", "seg_only", "clf_only")


@dataclass
class TrainConfig:
    seg_lr: float = 1e-3
    lr_ratio: float = 30.0
    clf_batch: int = 32
    batch_ratio: int = 8
    rounds: int = 3000
    poly_power: float = 0.9
    momentum: float = 0.9
    random_label_fraction: float = 0.0
    seed: int = 0
    mode: str = "joint"
    eval_interval: int = 500
    checkpoint_interval: int = 0

    @property
    def clf_lr(self) -> float:
        return self.lr_ratio * self.seg_lr

    @property
    def seg_batch(self) -> int:
        return self.clf_batch // self.batch_ratio

    def validate(self) -> None:
        if self.batch_ratio < 1 or self.clf_batch % self.batch_ratio or self.seg_batch < 1:
            raise ConfigError(
                f"train.clf_batch={self.clf_batch} must be a positive multiple of train.batch_ratio={self.batch_ratio}",
                ("train.clf_batch", "train.batch_ratio"),
            )
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}", ("train.mode",))
        if not 0.0 <= self.random_label_fraction <= 1.0:
            raise ConfigError("train.random_label_fraction must lie in [0, 1]", ("train.random_label_fraction",))
        if self.seg_lr < 0 or self.lr_ratio < 0:
            raise ConfigError("learning rates must be non-negative", ("train.seg_lr", "train.lr_ratio"))
        if self.rounds < 0:
            raise ConfigError("train.rounds must be >= 0", ("train.rounds",))
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("train.momentum must lie in [0, 1)", ("train.momentum",))
        if self.eval_interval < 1:
            raise ConfigError("train.eval_interval must be >= 1", ("train.eval_interval",))


@dataclass
class DataConfig:
    n_train: int = 2000
    n_val: int = 500
    size: int = 64
    seed: int = 0
    num_seg_classes: int = 6
    num_grades: int = 5
    # mean lesion count per class (1..4) at full severity; class 5 is severity-free
    max_counts: tuple[float, ...] = (1.8, 1.0, 3.0, 0.8, 0.6)
    healthy_fraction: float = 0.1

    def __post_init__(self):
        self.max_counts = tuple(float(v) for v in self.max_counts)

    def validate(self) -> None:
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("data.n_train and data.n_val must be >= 1", ("data.n_train", "data.n_val"))
        if self.size < 16:
            raise ConfigError("data.size must be >= 16", ("data.size",))
        if self.num_seg_classes != 6:
            raise ConfigError("the generator renders exactly 6 mask classes", ("data.num_seg_classes",))
        if self.num_grades != 5:
            raise ConfigError("the generator produces exactly 5 grades", ("data.num_grades",))
        if len(self.max_counts) != 5 or any(c < 0 for c in self.max_counts):
            raise ConfigError("data.max_counts needs 5 non-negative rates", ("data.max_counts",))
        if not 0.0 <= self.healthy_fraction <= 1.0:
            raise ConfigError("data.healthy_fraction must lie in [0, 1]", ("data.healthy_fraction",))


@dataclass
class PathsConfig:
    dataset: str = "dataset"
    output: str = "runs/default"


@dataclass
class ExperimentConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        if self.arch.input_hw != self.data.size:
            raise ConfigError(
                f"arch.input_hw={self.arch.input_hw} differs from data.size={self.data.size}",
                ("arch.input_hw", "data.size"),
            )
        if self.arch.num_seg_classes != self.data.num_seg_classes:
            raise ConfigError(
                f"arch.num_seg_classes={self.arch.num_seg_classes} differs from "
                f"data.num_seg_classes={self.data.num_seg_classes}",
                ("arch.num_seg_classes", "data.num_seg_classes"),
            )
        if self.arch.num_grades != self.data.num_grades:
            raise ConfigError(
                f"arch.num_grades={self.arch.num_grades} differs from data.num_grades={self.data.num_grades}",
                ("arch.num_grades", "data.num_grades"),
            )
        self.arch.validate()
        self.train.validate()
        self.data.validate()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        sections = {"arch": ArchConfig, "train": TrainConfig, "data": DataConfig, "paths": PathsConfig}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}", tuple(sorted(unknown)))
        kwargs = {}
        for key, klass in sections.items():
            values = raw.get(key, {})
            names = {f.name for f in dataclasses.fields(klass)}
            bad = set(values) - names
            if bad:
                raise ConfigError(f"unknown {key} fields {sorted(bad)}", tuple(f"{key}.{b}" for b in sorted(bad)))
            try:
                kwargs[key] = klass(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad {key} section: {exc}", (key,)) from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})", ("config",)) from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object", ("config",))
        return cls.from_dict(raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
