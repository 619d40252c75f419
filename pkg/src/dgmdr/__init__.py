"""Domain generalization with a mutual-information regularizer against a frozen oracle."""

from .core import (
    ConfigError,
    DataError,
    DomainDataset,
    FoldResult,
    Sample,
    TrainConfig,
    binarize_labels,
    class_distribution,
    split_train_val,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DomainDataset",
    "FoldResult",
    "Sample",
    "TrainConfig",
    "binarize_labels",
    "class_distribution",
    "split_train_val",
]
