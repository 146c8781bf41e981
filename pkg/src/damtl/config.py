"""Experiment configuration: TOML file -> validated dataclasses.

Unknown sections or keys abort before any computation; a typo never runs
silently with defaults. Every value is type-checked, and file paths named by
the dataset section must exist at validation time.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .data import OverlapSpec
from .errors import ConfigError
from .network import Architecture
from .training import PretrainConfig, TrainConfig

MODES = ("full", "ablate-no-alignment", "single-task-baseline")


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    classes: int = 10
    samples_per_class: int = 500
    image_size: int = 16
    noise: float = 0.25
    max_shift: int = 2
    seed: int = 0
    images_path: str = ""
    labels_path: str = ""
    csv_path: str = ""


@dataclass(frozen=True)
class SplitConfig:
    tasks: int = 2
    classes_per_task: int = 6
    shared_classes: int = 3
    train_fraction: float = 0.7
    train_cap: int = 500
    test_cap: int = 300

    def overlap_spec(self, seed: int) -> OverlapSpec:
        return OverlapSpec(self.tasks, self.classes_per_task, self.shared_classes, seed)


@dataclass(frozen=True)
class ArchConfig:
    conv_channels: tuple = (8, 16)
    conv_kernels: tuple = (3, 3)
    conv_strides: tuple = (2, 2)
    conv_paddings: tuple = (1, 1)
    fc_widths: tuple = (64, 32)

    def architecture(self, input_shape, class_count) -> Architecture:
        return Architecture(
            tuple(input_shape),
            self.conv_channels,
            self.conv_kernels,
            self.conv_strides,
            self.conv_paddings,
            self.fc_widths,
            class_count,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    split: SplitConfig
    arch: ArchConfig
    pretrain: PretrainConfig
    train: TrainConfig
    mode: str = "full"
    output_dir: str = "runs/out"
    record_timings: bool = False

    def resolved_dict(self) -> dict:
        """Plain-JSON view of every effective setting (for run provenance)."""

        def plain(obj):
            out = {}
            for k, v in obj.__dict__.items():
                out[k] = list(v) if isinstance(v, tuple) else v
            return out

        return {
            "dataset": plain(self.dataset),
            "split": plain(self.split),
            "arch": plain(self.arch),
            "pretrain": plain(self.pretrain),
            "train": plain(self.train),
            "experiment": {
                "mode": self.mode,
                "output_dir": self.output_dir,
                "record_timings": self.record_timings,
            },
        }


_BOOL = "bool"
_INT = "int"
_FLOAT = "float"
_STR = "str"
_INT_LIST = "list of ints"

_SCHEMA = {
    "dataset": {
        "source": _STR,
        "classes": _INT,
        "samples_per_class": _INT,
        "image_size": _INT,
        "noise": _FLOAT,
        "max_shift": _INT,
        "seed": _INT,
        "images_path": _STR,
        "labels_path": _STR,
        "csv_path": _STR,
    },
    "split": {
        "tasks": _INT,
        "classes_per_task": _INT,
        "shared_classes": _INT,
        "train_fraction": _FLOAT,
        "train_cap": _INT,
        "test_cap": _INT,
    },
    "arch": {
        "conv_channels": _INT_LIST,
        "conv_kernels": _INT_LIST,
        "conv_strides": _INT_LIST,
        "conv_paddings": _INT_LIST,
        "fc_widths": _INT_LIST,
    },
    "pretrain": {
        "learning_rate": _FLOAT,
        "batch_size": _INT,
        "max_epochs": _INT,
        "convergence_window": _INT,
        "convergence_tol": _FLOAT,
    },
    "train": {
        "learning_rate": _FLOAT,
        "lambda_l1": _FLOAT,
        "lambda_align": _FLOAT,
        "task_weight": _FLOAT,
        "batch_size": _INT,
        "max_epochs": _INT,
        "convergence_window": _INT,
        "convergence_tol": _FLOAT,
        "seed": _INT,
    },
    "experiment": {
        "mode": _STR,
        "output_dir": _STR,
        "record_timings": _BOOL,
    },
}


def _check_value(section: str, key: str, value, kind):
    if kind == _BOOL:
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key}: expected bool, got {value!r}")
        return value
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"[{section}] {key}: expected int, got {value!r}")
        return value
    if kind == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key}: expected number, got {value!r}")
        return float(value)
    if kind == _STR:
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] {key}: expected string, got {value!r}")
        return value
    if kind == _INT_LIST:
        if not isinstance(value, list) or not value or any(
            isinstance(v, bool) or not isinstance(v, int) for v in value
        ):
            raise ConfigError(f"[{section}] {key}: expected a non-empty list of ints, got {value!r}")
        return tuple(value)
    raise AssertionError(kind)


def _section(raw: dict, name: str) -> dict:
    section = raw.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"[{name}] must be a table")
    schema = _SCHEMA[name]
    unknown = sorted(set(section) - set(schema))
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {', '.join(unknown)}")
    return {k: _check_value(name, k, v, schema[k]) for k, v in section.items()}


def parse_experiment_config(raw: dict, base_dir: str = ".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    unknown = sorted(set(raw) - set(_SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")

    dataset = DatasetConfig(**_section(raw, "dataset"))
    split = SplitConfig(**_section(raw, "split"))
    arch = ArchConfig(**_section(raw, "arch"))
    pretrain = PretrainConfig(**_section(raw, "pretrain"))
    train = TrainConfig(**_section(raw, "train"))
    exp = _section(raw, "experiment")
    mode = exp.get("mode", "full")
    if mode not in MODES:
        raise ConfigError(f"[experiment] mode must be one of {MODES}, got {mode!r}")

    if dataset.source not in ("synthetic", "idx", "csv"):
        raise ConfigError(f"[dataset] source must be synthetic|idx|csv, got {dataset.source!r}")

    def resolve(label: str, p: str) -> str:
        if not p:
            raise ConfigError(f"[dataset] {label} required for source = \"{dataset.source}\"")
        resolved = os.path.abspath(os.path.join(base_dir, p))
        if not os.path.exists(resolved):
            raise ConfigError(f"[dataset] {label}: no such file: {p}")
        return resolved

    if dataset.source == "idx":
        dataset = dataclasses.replace(
            dataset,
            images_path=resolve("images_path", dataset.images_path),
            labels_path=resolve("labels_path", dataset.labels_path),
        )
    if dataset.source == "csv":
        dataset = dataclasses.replace(dataset, csv_path=resolve("csv_path", dataset.csv_path))
    if dataset.source == "synthetic":
        if dataset.classes < 2 or dataset.samples_per_class < 1 or dataset.image_size < 4:
            raise ConfigError("[dataset] synthetic corpus needs classes >= 2, samples >= 1, image_size >= 4")
        if dataset.seed < 0:
            raise ConfigError("[dataset] seed must be >= 0")

    if not 0.0 < split.train_fraction < 1.0:
        raise ConfigError(f"[split] train_fraction must be in (0, 1), got {split.train_fraction}")
    if split.train_cap < 1 or split.test_cap < 1:
        raise ConfigError("[split] train_cap and test_cap must be >= 1")

    train.validate()
    pretrain.validate()

    return ExperimentConfig(
        dataset=dataset,
        split=split,
        arch=arch,
        pretrain=pretrain,
        train=train,
        mode=mode,
        output_dir=exp.get("output_dir", "runs/out"),
        record_timings=exp.get("record_timings", False),
    )


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML: {e}") from e
    return parse_experiment_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))
