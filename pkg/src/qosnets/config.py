"""Pipeline configuration, read from a YAML file.

Example (every key optional; shown with defaults)::

    output_dir: runs/toy
    dataset:
      source: synthetic        # or "idx"
      seed: 0                  # synthetic generator seed
      split_seed: 0            # train/val/test shuffle
      n_train: 6000
      n_val: 1000
      n_test: 2000
      train_images: null       # idx only; paths relative to this file
      train_labels: null
      test_images: null
      test_labels: null
    model: {arch: toy_cnn, input_hw: 16, width: [8, 16], seed: 0}
    train: {lr: 0.05, momentum: 0.9, epochs: 6, batch_size: 64, seed: 0, lr_schedule: null}
    calibration_samples: 1000
    sensitivity: {lambda: 0.1, sigma_max: 0.05, sigma_initial: 0.001, epochs: 5, lr: 0.1,
                  momentum: 0.9, batch_size: 64, seed: 0}
    selection: {scale_set: [0.1, 0.3, 1.0], n: 3, seed: 0, error_samples: 512, n_init: 10}
    library: {path: null, truncation: [1, 2, 3, 4, 5]}
    finetune: {epochs: 2, lr_schedule: [0.002, 0.0002], momentum: 0.9, batch_size: 64,
               seed: 0, calib_samples: 512}

With ``dataset.source: idx`` the val split is carved out of the IDX training
file and ``n_test`` caps the IDX test file.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .sensitivity import SensitivityConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    seed: int = 0
    split_seed: int = 0
    n_train: int = 6000
    n_val: int = 1000
    n_test: int = 2000
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class ModelConfig:
    arch: str = "toy_cnn"
    input_hw: int = 16
    width: list[int] = field(default_factory=lambda: [8, 16])
    seed: int = 0


@dataclass
class TrainSection:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 6
    batch_size: int = 64
    seed: int = 0
    lr_schedule: list[float] | None = None


@dataclass
class SelectionConfig:
    scale_set: list[float] = field(default_factory=lambda: [0.1, 0.3, 1.0])
    n: int = 3
    seed: int = 0
    error_samples: int = 512
    n_init: int = 10


@dataclass
class LibraryConfig:
    path: str | None = None
    truncation: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])


@dataclass
class FinetuneConfig:
    epochs: int = 2
    lr_schedule: list[float] = field(default_factory=lambda: [2e-3, 2e-4])
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    calib_samples: int = 512


@dataclass
class PipelineConfig:
    output_dir: str = "runs/toy"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    calibration_samples: int = 1000
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    library: LibraryConfig = field(default_factory=LibraryConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    base_dir: str = "."

    def __post_init__(self):
        if self.selection.n < 1:
            raise ConfigError("selection.n must be >= 1")
        if not self.selection.scale_set or min(self.selection.scale_set) <= 0:
            raise ConfigError("selection.scale_set must be non-empty and positive")
        if self.dataset.source not in ("synthetic", "idx"):
            raise ConfigError(f"dataset.source must be synthetic or idx, got {self.dataset.source!r}")
        if self.model.arch != "toy_cnn":
            raise ConfigError(f"unknown model.arch {self.model.arch!r}")
        if self.model.input_hw % 4:
            raise ConfigError("model.input_hw must be divisible by 4")

    @property
    def o(self) -> int:
        return len(self.selection.scale_set)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with every stage seed set to ``seed``."""
        c = copy.deepcopy(self)
        for section in (c.dataset, c.model, c.train, c.selection, c.finetune):
            section.seed = seed
        c.sensitivity = dataclasses.replace(c.sensitivity, seed=seed)
        c.dataset.split_seed = seed
        return c

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    data = {_ALIASES.get((cls, k), k): v for k, v in data.items()}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


_NESTED = {
    (PipelineConfig, "dataset"): DatasetConfig,
    (PipelineConfig, "model"): ModelConfig,
    (PipelineConfig, "train"): TrainSection,
    (PipelineConfig, "sensitivity"): SensitivityConfig,
    (PipelineConfig, "selection"): SelectionConfig,
    (PipelineConfig, "library"): LibraryConfig,
    (PipelineConfig, "finetune"): FinetuneConfig,
}


_ALIASES = {(SensitivityConfig, "lambda"): "lam"}


def config_from_dict(data: dict, base_dir=".") -> PipelineConfig:
    data = dict(data or {})
    data["base_dir"] = str(base_dir)
    return _build(PipelineConfig, data, "config")


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(data or {}, base_dir=path.parent)
