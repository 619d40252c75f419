"""Domain model, run configuration, label handling and dataset splitting."""
from __future__ import annotations

import csv
import os
from collections import Counter
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

NUM_GRADES = 5
GRADE_NAMES = ("No DR", "Mild", "Moderate", "Severe", "Proliferative")
VAL_FRACTION = 0.2
MIN_SPLIT_SIZE = 5
DATA_ROOT_ENV = "DGMDR_DATA_ROOT"

ALGORITHMS = ("erm", "dgmdr", "dgmdr_swad")
TASK_MODES = ("multiclass", "binary")
SPLIT_TAGS = ("train", "val", "none")


class ConfigError(ValueError):
    """Invalid configuration; ``field_errors`` maps field name to message."""

    def __init__(self, field_errors: dict[str, str]):
        self.field_errors = dict(field_errors)
        msg = "; ".join(f"{k}: {v}" for k, v in sorted(self.field_errors.items()))
        super().__init__(f"invalid configuration: {msg}")


class DataError(RuntimeError):
    """Missing or unreadable data (manifests, images, data root)."""


@dataclass(frozen=True)
class Sample:
    image_ref: str
    grade: int
    domain_name: str
    label: Optional[int] = None

    def __post_init__(self):
        if not isinstance(self.grade, (int, np.integer)) or not 0 <= self.grade < NUM_GRADES:
            raise ValueError(f"grade must be an integer in 0..4, got {self.grade!r} ({self.image_ref})")
        if self.label is None:
            object.__setattr__(self, "label", int(self.grade))


@dataclass(frozen=True)
class DomainDataset:
    name: str
    samples: tuple[Sample, ...]
    split_tags: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.split_tags:
            object.__setattr__(self, "split_tags", ("none",) * len(self.samples))
        else:
            object.__setattr__(self, "split_tags", tuple(self.split_tags))
        if len(self.split_tags) != len(self.samples):
            raise ValueError("split_tags must have one entry per sample")
        for tag in self.split_tags:
            if tag not in SPLIT_TAGS:
                raise ValueError(f"unknown split tag {tag!r}")
        for s in self.samples:
            if s.domain_name != self.name:
                raise ValueError(f"sample {s.image_ref} belongs to {s.domain_name!r}, not {self.name!r}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def is_split(self) -> bool:
        return any(t != "none" for t in self.split_tags)

    def subset(self, tag: str) -> list[Sample]:
        return [s for s, t in zip(self.samples, self.split_tags) if t == tag]

    @property
    def train_samples(self) -> list[Sample]:
        return self.subset("train") if self.is_split else list(self.samples)

    @property
    def val_samples(self) -> list[Sample]:
        return self.subset("val")

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.samples]


@dataclass(frozen=True)
class FoldResult:
    target_domain: str
    seed: int
    accuracy: float
    selected_step: int
    per_class_accuracy: tuple[float, ...] = ()
    algorithm: str = "dgmdr"

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must be in [0, 1], got {self.accuracy}")


@dataclass(frozen=True)
class TrainConfig:
    """All settings for one training run.

    Defaults are the fundus-scale settings (Adam at 5e-5, no weight decay,
    5000 steps, batch 32, regularization weight 1.0).
    """

    name: str = "run"
    algorithm: str = "dgmdr"
    task_mode: str = "multiclass"
    num_classes: int = 5
    lr: float = 5e-5
    weight_decay: float = 0.0
    steps: int = 5000
    batch_size: int = 32
    lam: float = 1.0
    seed: int = 0
    eval_interval: int = 100
    swad_enabled: bool = False
    swad_patience: int = 3
    swad_tolerance: float = 1.2
    # augmentation
    image_size: int = 224
    hist_eq_prob: float = 0.5
    hflip_prob: float = 0.5
    jitter_strength: float = 0.3
    jitter_prob: float = 0.3
    norm_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    norm_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    # encoder
    architecture: str = "tiny_cnn"
    tiny_width: int = 16
    oracle_checkpoint: Optional[str] = None
    oracle_seed: int = 0
    oracle_pretrain_steps: int = 300
    oracle_pretrain_lr: float = 1e-3
    # data
    domains: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "norm_mean", tuple(float(v) for v in self.norm_mean))
        object.__setattr__(self, "norm_std", tuple(float(v) for v in self.norm_std))
        errors = self.validate()
        if errors:
            raise ConfigError(errors)

    def validate(self) -> dict[str, str]:
        err = {}
        if self.algorithm not in ALGORITHMS:
            err["algorithm"] = f"must be one of {ALGORITHMS}"
        if self.task_mode not in TASK_MODES:
            err["task_mode"] = f"must be one of {TASK_MODES}"
        elif self.task_mode == "binary" and self.num_classes != 2:
            err["num_classes"] = "binary task requires num_classes == 2"
        elif self.task_mode == "multiclass" and not 3 <= self.num_classes <= NUM_GRADES:
            err["num_classes"] = "multiclass task requires 3 <= num_classes <= 5"
        if not self.lr > 0:
            err["lr"] = "must be > 0"
        if self.weight_decay < 0:
            err["weight_decay"] = "must be >= 0"
        if self.steps <= 0:
            err["steps"] = "must be > 0"
        if self.batch_size <= 0:
            err["batch_size"] = "must be > 0"
        if self.lam < 0:
            err["lambda"] = "must be >= 0"
        if self.eval_interval <= 0:
            err["eval_interval"] = "must be > 0"
        if self.swad_patience < 1:
            err["swad_patience"] = "must be >= 1"
        if self.swad_tolerance < 1:
            err["swad_tolerance"] = "must be >= 1"
        if self.image_size < 8:
            err["image_size"] = "must be >= 8"
        for key in ("hist_eq_prob", "hflip_prob", "jitter_prob"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                err[key] = "probability must be in [0, 1]"
        if not 0.0 <= self.jitter_strength < 1.0:
            err["jitter_strength"] = "must be in [0, 1)"
        if len(self.norm_mean) != 3:
            err["norm_mean"] = "needs 3 channel values"
        if len(self.norm_std) != 3 or any(v <= 0 for v in self.norm_std):
            err["norm_std"] = "needs 3 positive channel values"
        if self.tiny_width < 1:
            err["tiny_width"] = "must be >= 1"
        if self.oracle_pretrain_steps < 0:
            err["oracle_pretrain_steps"] = "must be >= 0"
        return err

    @property
    def uses_penalty(self) -> bool:
        return self.algorithm != "erm" and self.lam > 0

    @property
    def use_swad(self) -> bool:
        return self.swad_enabled or self.algorithm == "dgmdr_swad"

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    # flat key/value document; "lambda" is the on-disk spelling of ``lam``
    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            out["lambda" if f.name == "lam" else f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs, errors = {}, {}
        for key, value in data.items():
            name = "lam" if key == "lambda" else key
            if name not in known or key == "lam":
                errors[key] = "unknown key"
                continue
            try:
                kwargs[name] = _coerce(known[name].default, value, name)
            except (TypeError, ValueError) as exc:
                errors[key] = str(exc)
        if errors:
            raise ConfigError(errors)
        if "task_mode" in kwargs and "num_classes" not in kwargs and kwargs["task_mode"] == "binary":
            kwargs["num_classes"] = 2
        return cls(**kwargs)


def _coerce(default, value, name):
    if name == "oracle_checkpoint":
        if value is not None and not isinstance(value, str):
            raise TypeError("expected a path string or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError("expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise TypeError("expected a list")
        return tuple(value)
    return value


def split_train_val(dataset: DomainDataset, seed: int) -> DomainDataset:
    """Tag round-half-up(20%) of the samples as validation via a seeded permutation."""
    n = len(dataset)
    if n < MIN_SPLIT_SIZE:
        raise ValueError(f"domain too small to split: {dataset.name!r} has {n} samples")
    if dataset.is_split:
        raise ValueError(f"domain {dataset.name!r} is already split")
    n_val = val_count(n)
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    tags = tuple("val" if i in val_idx else "train" for i in range(n))
    return DomainDataset(dataset.name, dataset.samples, tags)


def val_count(n: int) -> int:
    # exact decimal arithmetic: 0.2 * n == n / 5
    return (2 * n + 5) // 10


def binarize_labels(dataset: DomainDataset) -> DomainDataset:
    """Map grade 0 to label 0 and grades 1-4 to label 1; grades are kept."""
    samples = [replace(s, label=int(s.grade > 0)) for s in dataset.samples]
    return DomainDataset(dataset.name, samples, dataset.split_tags)


def class_distribution(dataset: DomainDataset, num_classes: int = NUM_GRADES) -> list[tuple[int, float]]:
    """Fraction of samples per grade, for every grade in ``range(num_classes)``."""
    if len(dataset) == 0:
        raise ValueError(f"class distribution of empty domain {dataset.name!r}")
    counts = Counter(s.grade for s in dataset.samples)
    n = len(dataset)
    return [(g, counts.get(g, 0) / n) for g in range(num_classes)]


def format_distribution(dist: Sequence[tuple[int, float]]) -> dict[str, str]:
    return {GRADE_NAMES[g] if g < len(GRADE_NAMES) else str(g): f"{100 * frac:.2f}%" for g, frac in dist}


# -- manifests -------------------------------------------------------------

def resolve_data_root(flag: Optional[str]) -> Path:
    root = flag or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise DataError(f"no data root: pass --data-root or set {DATA_ROOT_ENV}")
    path = Path(root)
    if not path.is_dir():
        raise DataError(f"data root {path} does not exist")
    return path


def read_manifest(path: Path, data_root: Path, name: Optional[str] = None) -> DomainDataset:
    """Read an ``image_path,grade`` CSV; image paths are relative to ``data_root``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} not found")
    name = name or path.stem
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames[:2]) != ["image_path", "grade"]:
            raise DataError(f"manifest {path} must have header 'image_path,grade'")
        for lineno, row in enumerate(reader, start=2):
            try:
                grade = int(row["grade"])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: grade {row['grade']!r} is not an integer") from None
            if not 0 <= grade < NUM_GRADES:
                raise DataError(f"{path}:{lineno}: grade {grade} outside 0..4")
            samples.append(Sample(str(Path(data_root) / row["image_path"]), grade, name))
    return DomainDataset(name, samples)


def write_manifest(dataset: DomainDataset, path: Path, data_root: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_path", "grade"])
        for s in dataset.samples:
            w.writerow([os.path.relpath(s.image_ref, data_root), s.grade])


def discover_domains(data_root: Path, names: Iterable[str] = ()) -> list[DomainDataset]:
    """Load ``<data_root>/<name>.csv`` for each name, or every manifest when none given."""
    data_root = Path(data_root)
    names = list(names)
    if not names:
        names = sorted(p.stem for p in data_root.glob("*.csv"))
    if not names:
        raise DataError(f"no domain manifests (*.csv) under {data_root}")
    return [read_manifest(data_root / f"{n}.csv", data_root, n) for n in names]


def task_labels(dataset: DomainDataset, task_mode: str) -> DomainDataset:
    return binarize_labels(dataset) if task_mode == "binary" else dataset

