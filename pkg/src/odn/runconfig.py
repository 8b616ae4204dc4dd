"""Flat key=value run configuration files.

One ``key = value`` pair per line, ``#`` comments, blank lines ignored.
Unknown keys are hard errors so a typo in a hyperparameter name cannot pass
silently.  A run directory always receives a normalized copy of the effective
configuration, which is sufficient to reproduce the run exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .search import OptimizerConfig, SearchConfig

DATA_ROOT_ENV = "ODN_DATA_ROOT"


class ConfigError(ValueError):
    """Malformed or invalid run configuration."""


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected boolean, got {value!r}")


@dataclass
class RunConfig:
    # dataset
    dataset: str = "synthetic"  # synthetic | idx | cifar10
    synth_difficulty: str = "easy"
    synth_classes: int = 4
    synth_samples_per_class: int = 50
    synth_image_size: int = 16
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    cifar_train_batches: str = ""  # comma-separated paths
    cifar_test_batch: str = ""
    limit_train: int = 0  # 0 = use everything
    num_classes: int = 0  # 0 = derive from data
    val_fraction: float = 0.1
    image_size: int = 0  # 0 = native; else zero-pad to this size
    in_channels: int = 0  # 0 = native channel count; else replicate
    augment: str = "none"  # none | crop_flip
    # model
    arch: str = "resnet18"
    width_multiplier: float = 1.0
    # search hyperparameters
    target_accuracy: float = 0.9
    initial_depth: int = 1
    final_depth: int = 0  # 0 = D_max of the architecture
    warmup_epochs: int = 3
    warmup_lr: float = 0.01
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    stop_epochs: int = 23
    lr_decay_factor: float = 0.6
    lr_decay_interval: int = 5
    max_epochs_per_depth: int = 200
    seed: int = 0
    # output
    output_dir: str = "runs/odn"
    timing: str = "none"  # none (deterministic zeros) | wall
    report_formats: str = "csv,json"

    def __post_init__(self) -> None:
        if self.dataset not in ("synthetic", "idx", "cifar10"):
            raise ConfigError(f"dataset must be synthetic/idx/cifar10, got {self.dataset!r}")
        if self.augment not in ("none", "crop_flip"):
            raise ConfigError(f"augment must be none/crop_flip, got {self.augment!r}")
        if self.timing not in ("none", "wall"):
            raise ConfigError(f"timing must be none/wall, got {self.timing!r}")
        if self.dataset == "idx" and (not self.idx_train_images or not self.idx_train_labels):
            raise ConfigError("idx dataset requires idx_train_images and idx_train_labels")
        if self.dataset == "cifar10" and not self.cifar_train_batches:
            raise ConfigError("cifar10 dataset requires cifar_train_batches")

    def search_config(self, depth_max: int) -> SearchConfig:
        final = self.final_depth if self.final_depth else depth_max
        return SearchConfig(
            target_accuracy=self.target_accuracy,
            initial_depth=self.initial_depth,
            final_depth=final,
            warmup_epochs=self.warmup_epochs,
            warmup_lr=self.warmup_lr,
            base_lr=self.lr,
            stop_epochs=self.stop_epochs,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_interval=self.lr_decay_interval,
            optimizer=OptimizerConfig(self.lr, self.momentum, self.weight_decay),
            batch_size=self.batch_size,
            seed=self.seed,
            max_epochs_per_depth=self.max_epochs_per_depth,
            augment=self.augment == "crop_flip",
        )

    def resolve_path(self, p: str) -> Path:
        path = Path(p)
        if not path.is_absolute():
            root = os.environ.get(DATA_ROOT_ENV)
            if root:
                return Path(root) / path
        return path

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_run_config(text: str) -> RunConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        ftype = _FIELD_TYPES[key]
        try:
            if ftype in ("int", int):
                values[key] = int(value)
            elif ftype in ("float", float):
                values[key] = float(value)
            elif ftype in ("bool", bool):
                values[key] = _parse_bool(value)
            else:
                values[key] = value
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return RunConfig(**values)


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(text)
