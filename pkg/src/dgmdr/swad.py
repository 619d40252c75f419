"""Simplified dense weight averaging over a validation-selected window.

Reports label this mode "SWAD-simplified": the window rule below is a
deterministic stand-in for the original overfit-aware interval search.

* start ``t_s``: the first evaluation whose validation loss is no higher
  than the minimum of the next ``patience`` evaluations;
* end ``t_e``: the last evaluation at or after ``t_s`` whose loss is within
  ``tolerance_ratio`` times the running minimum loss up to that point;
* fallback when no start qualifies: the final ``patience`` evaluations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SWAD_LABEL = "SWAD-simplified"


@dataclass(frozen=True)
class SwadConfig:
    patience: int = 3
    tolerance_ratio: float = 1.2

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.tolerance_ratio < 1:
            raise ValueError("tolerance_ratio must be >= 1")


@dataclass
class WeightSnapshot:
    step: int
    params: np.ndarray
    val_loss: float
    val_accuracy: float


def select_window(val_losses: Sequence[tuple[int, float]], cfg: SwadConfig = SwadConfig()) -> tuple[int, int]:
    if not val_losses:
        raise ValueError("no validation losses recorded")
    steps = [int(s) for s, _ in val_losses]
    losses = [float(l) for _, l in val_losses]
    n, k = len(losses), cfg.patience

    start = None
    for i in range(n - k):
        if losses[i] <= min(losses[i + 1:i + 1 + k]):
            start = i
            break
    if start is None:
        return steps[max(0, n - k)], steps[-1]

    end = start
    running_min = min(losses[:start + 1])
    for j in range(start, n):
        running_min = min(running_min, losses[j])
        if losses[j] <= cfg.tolerance_ratio * running_min:
            end = j
    return steps[start], steps[end]


def _accumulate(mean: np.ndarray, vec: np.ndarray, count: int) -> None:
    # incremental mean: exact for identical vectors, same order on disk and in memory
    mean += (vec - mean) / count


def average_weights(snapshots: Iterable) -> np.ndarray:
    """Elementwise mean of snapshot parameter vectors (WeightSnapshot or arrays)."""
    vecs = [np.asarray(s.params if isinstance(s, WeightSnapshot) else s, dtype=np.float64) for s in snapshots]
    if not vecs:
        raise ValueError("no snapshots to average")
    n = vecs[0].shape
    for v in vecs:
        if v.shape != n:
            raise ValueError(f"snapshot length mismatch: {v.shape} vs {n}")
    mean = np.zeros(n, dtype=np.float64)
    for i, v in enumerate(vecs, start=1):
        _accumulate(mean, v, i)
    return mean


def snapshots_in_window(snapshots: Sequence[WeightSnapshot], window: tuple[int, int]) -> list[WeightSnapshot]:
    t_s, t_e = window
    chosen = [s for s in snapshots if t_s <= s.step <= t_e]
    if not chosen:
        raise ValueError(f"no snapshots in window {window}")
    return chosen


# -- on-disk snapshots -------------------------------------------------------

def snapshot_path(directory: Path, step: int) -> Path:
    return Path(directory) / f"snapshot_{step:07d}.npz"


def save_snapshot(directory: Path, snap: WeightSnapshot) -> Path:
    path = snapshot_path(directory, snap.step)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"step": snap.step, "val_loss": snap.val_loss, "val_accuracy": snap.val_accuracy}
    with open(path, "wb") as fh:
        np.savez(fh, params=snap.params, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
    return path


def load_snapshot(path: Path) -> WeightSnapshot:
    with np.load(path) as data:
        meta = json.loads(data["meta"].tobytes().decode())
        params = data["params"].copy()
    return WeightSnapshot(meta["step"], params, meta["val_loss"], meta["val_accuracy"])


def list_snapshots(directory: Path) -> list[Path]:
    return sorted(Path(directory).glob("snapshot_*.npz"))


def swad_from_directory(directory: Path, cfg: SwadConfig = SwadConfig()) -> tuple[tuple[int, int], np.ndarray]:
    """Re-run window selection and averaging offline from stored snapshots.

    Snapshots are streamed: only one parameter vector is held at a time.
    """
    paths = list_snapshots(directory)
    if not paths:
        raise ValueError(f"no snapshots under {directory}")
    metas = []
    for p in paths:
        with np.load(p) as data:
            metas.append((p, json.loads(data["meta"].tobytes().decode())))
    window = select_window([(m["step"], m["val_loss"]) for _, m in metas], cfg)
    mean, count = None, 0
    for p, m in metas:
        if window[0] <= m["step"] <= window[1]:
            vec = load_snapshot(p).params.astype(np.float64)
            if mean is None:
                mean = np.zeros_like(vec)
            count += 1
            _accumulate(mean, vec, count)
    return window, mean
