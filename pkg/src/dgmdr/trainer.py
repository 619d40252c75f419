"""Optimization loop for the ERM and oracle-regularized objectives."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, ImageStore, augment_to_size, normalize_batch
from .core import DomainDataset, Sample, TrainConfig
from .encoder import (
    Classifier,
    FeatureExtractor,
    OraclePair,
    build_extractor,
    classify,
    extract_features,
    flat_parameters,
    load_extractor_weights,
    load_flat_parameters,
    save_checkpoint,
)
from .mi_reg import VariationalHead, mi_penalty, total_loss
from .swad import SwadConfig, WeightSnapshot, average_weights, save_snapshot, select_window, snapshots_in_window

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "ce", "penalty", "total", "val_acc")
EVAL_BATCH = 64


class NonFiniteLossError(FloatingPointError):
    def __init__(self, record: dict):
        self.record = record
        super().__init__(f"non-finite loss at step {record['step']}: {record['losses']}")


# -- minibatches ------------------------------------------------------------

@dataclass
class SamplerState:
    """Seeded stream plus per-domain epoch permutations and cursors."""

    rng: np.random.Generator
    orders: dict = field(default_factory=dict)
    cursors: dict = field(default_factory=dict)

    @classmethod
    def create(cls, seed: int) -> "SamplerState":
        return cls(np.random.default_rng(seed))

    def draw(self, name: str, n_items: int, k: int) -> list[int]:
        out = []
        while len(out) < k:
            order = self.orders.get(name)
            cur = self.cursors.get(name, 0)
            if order is None or cur >= n_items:
                order = self.rng.permutation(n_items)
                self.orders[name] = order
                cur = 0
            take = min(k - len(out), n_items - cur)
            out.extend(order[cur:cur + take].tolist())
            self.cursors[name] = cur + take
        return out


def domain_shares(num_domains: int, batch_size: int, rng: np.random.Generator) -> list[int]:
    """Equal per-domain shares; the remainder goes round-robin in a seeded order."""
    base, rem = divmod(batch_size, num_domains)
    shares = [base] * num_domains
    for d in rng.permutation(num_domains)[:rem]:
        shares[int(d)] += 1
    return shares


def make_minibatch(source_domains: Sequence[DomainDataset], batch_size: int,
                   state: SamplerState) -> list[tuple[Sample, int, str]]:
    if batch_size < len(source_domains):
        raise ValueError(f"batch_size {batch_size} < number of source domains {len(source_domains)}")
    pools = []
    for ds in source_domains:
        pool = ds.train_samples
        if not pool:
            raise ValueError(f"source domain {ds.name!r} has no training samples")
        pools.append(pool)
    shares = domain_shares(len(source_domains), batch_size, state.rng)
    batch = []
    for ds, pool, k in zip(source_domains, pools, shares):
        for i in state.draw(ds.name, len(pool), k):
            s = pool[i]
            batch.append((s, s.label, ds.name))
    return batch


def image_tensor(refs: Sequence[str], store: ImageStore, aug: AugmentConfig,
                 rng: Optional[np.random.Generator] = None) -> torch.Tensor:
    """Transform the images behind ``refs`` into a normalized (B, 3, H, W) batch."""
    images = np.stack([augment_to_size(store.get(r), aug, rng) for r in refs])
    return normalize_batch(images, aug.mean, aug.std)


def load_batch(batch, store: ImageStore, aug: AugmentConfig, rng: Optional[np.random.Generator]):
    x = image_tensor([s.image_ref for s, _, _ in batch], store, aug, rng)
    labels = torch.tensor([lbl for _, lbl, _ in batch], dtype=torch.long)
    return x, labels


# -- state and step ---------------------------------------------------------

@dataclass
class TrainState:
    step: int
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    sampler: SamplerState
    best_val_accuracy: float = -math.inf
    best_checkpoint_step: int = -1


def trainable_modules(pair: OraclePair, g: Classifier, head: VariationalHead):
    return [pair.target, g, head]


def make_state(cfg: TrainConfig, pair: OraclePair, g: Classifier, head: VariationalHead) -> TrainState:
    params = [p for m in trainable_modules(pair, g, head) for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
    return TrainState(
        step=0,
        optimizer=opt,
        rng=np.random.default_rng([cfg.seed, 1]),
        sampler=SamplerState.create([cfg.seed, 2]),
    )


def train_step(state: TrainState, pair: OraclePair, g: Classifier, head: VariationalHead,
               batch: tuple[torch.Tensor, torch.Tensor], cfg: TrainConfig, refs: Sequence[str] = ()):
    """One Adam update on (f, g, head); returns the state and (ce, penalty, total)."""
    if state.step >= cfg.steps:
        raise ValueError(f"run already finished ({state.step} of {cfg.steps} steps)")
    x, y = batch
    pair.target.train()
    z_f, z_f0 = extract_features(pair, x)
    logits = classify(g, z_f)
    if cfg.uses_penalty:
        penalty = mi_penalty(z_f0, z_f, head)
        loss = total_loss(logits, y, penalty, cfg.lam)
        ce = F.cross_entropy(logits.detach(), y).item()
        pen = penalty.item()
    else:
        # ERM, or lambda == 0: the penalty is never built, so it adds no gradient
        loss = total_loss(logits, y, 0.0, 0.0)
        ce = loss.item()
        pen = 0.0
    tot = loss.item()
    if not all(math.isfinite(v) for v in (ce, pen, tot)):
        raise NonFiniteLossError({
            "step": state.step + 1,
            "losses": {"ce": ce, "penalty": pen, "total": tot},
            "batch": list(refs),
        })
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return state, (ce, pen, tot)


# -- evaluation -------------------------------------------------------------

@torch.no_grad()
def predict_logits(extractor: FeatureExtractor, g: Classifier, samples: Sequence[Sample],
                   store: ImageStore, aug: AugmentConfig) -> torch.Tensor:
    was_training = extractor.training
    extractor.eval()
    out = []
    for i in range(0, len(samples), EVAL_BATCH):
        chunk = samples[i:i + EVAL_BATCH]
        x = image_tensor([s.image_ref for s in chunk], store, aug)
        out.append(classify(g, extractor(x)))
    extractor.train(was_training)
    return torch.cat(out)


def evaluate(extractor, g, samples, store, aug, num_classes) -> dict:
    """Accuracy, mean CE and per-class accuracy on ``samples`` (eval transforms)."""
    from .harness import accuracy

    logits = predict_logits(extractor, g, samples, store, aug)
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)
    preds = logits.argmax(dim=1)
    per_class = []
    for c in range(num_classes):
        mask = labels == c
        per_class.append(float((preds[mask] == c).float().mean()) if mask.any() else float("nan"))
    return {
        "accuracy": accuracy(preds.tolist(), labels.tolist()),
        "loss": float(F.cross_entropy(logits, labels)),
        "per_class_accuracy": per_class,
        "correct": int((preds == labels).sum()),
        "total": len(samples),
    }


# -- full run ---------------------------------------------------------------

@dataclass
class TrainResult:
    best_params: np.ndarray
    best_step: int
    best_val_accuracy: float
    snapshots: list[WeightSnapshot]
    metrics: list[tuple]
    swad_window: Optional[tuple[int, int]] = None
    swad_params: Optional[np.ndarray] = None


def eval_steps(cfg: TrainConfig) -> list[int]:
    steps = list(range(cfg.eval_interval, cfg.steps + 1, cfg.eval_interval))
    if not steps or steps[-1] != cfg.steps:
        steps.append(cfg.steps)
    return steps


def format_metrics_row(row: tuple) -> list[str]:
    step, ce, pen, tot, val = row
    return [str(step), repr(ce), repr(pen), repr(tot), "" if val is None else repr(val)]


def write_metrics(path: Path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow(format_metrics_row(row))


def train_run(cfg: TrainConfig, source_domains: Sequence[DomainDataset], pair: OraclePair,
              g: Classifier, head: VariationalHead, store: Optional[ImageStore] = None,
              run_dir: Optional[Path] = None) -> TrainResult:
    """Train for ``cfg.steps`` steps with pooled training-domain validation.

    Every evaluation records a weight snapshot; the returned best checkpoint
    maximizes pooled validation accuracy (ties go to the earlier step).
    """
    if not all(ds.is_split for ds in source_domains):
        raise ValueError("source domains must be split with split_train_val first")
    store = store or ImageStore(cfg.image_size)
    aug_train = AugmentConfig.from_train_config(cfg, train_mode=True)
    aug_eval = aug_train.eval()
    val_pool = [s for ds in source_domains for s in ds.val_samples]
    modules = trainable_modules(pair, g, head)
    state = make_state(cfg, pair, g, head)
    checkpoint_dir = Path(run_dir) / "checkpoints" if run_dir else None
    todo = set(eval_steps(cfg))

    metrics, snapshots = [], []
    best_params = flat_parameters(p for m in modules for p in m.parameters()).numpy().copy()
    while state.step < cfg.steps:
        batch = make_minibatch(source_domains, cfg.batch_size, state.sampler)
        x, y = load_batch(batch, store, aug_train, state.rng)
        try:
            state, (ce, pen, tot) = train_step(state, pair, g, head, (x, y), cfg,
                                               refs=[s.image_ref for s, _, _ in batch])
        except NonFiniteLossError as exc:
            if run_dir:
                Path(run_dir).mkdir(parents=True, exist_ok=True)
                (Path(run_dir) / "error.json").write_text(json.dumps(exc.record, indent=2))
                write_metrics(Path(run_dir) / "metrics.csv", metrics)
            raise
        val_acc = None
        if state.step in todo:
            ev = evaluate(pair.target, g, val_pool, store, aug_eval, cfg.num_classes)
            val_acc = ev["accuracy"]
            params = flat_parameters(p for m in modules for p in m.parameters()).numpy().copy()
            snap = WeightSnapshot(state.step, params, ev["loss"], val_acc)
            snapshots.append(snap)
            if checkpoint_dir is not None:
                save_snapshot(checkpoint_dir, snap)
            if val_acc > state.best_val_accuracy:
                state.best_val_accuracy = val_acc
                state.best_checkpoint_step = state.step
                best_params = params
            log.debug("step %d val_acc %.4f val_loss %.4f", state.step, val_acc, ev["loss"])
        metrics.append((state.step, ce, pen, tot, val_acc))

    result = TrainResult(best_params, state.best_checkpoint_step, state.best_val_accuracy, snapshots, metrics)
    if cfg.use_swad:
        swad_cfg = SwadConfig(cfg.swad_patience, cfg.swad_tolerance)
        window = select_window([(s.step, s.val_loss) for s in snapshots], swad_cfg)
        result.swad_window = window
        result.swad_params = average_weights(snapshots_in_window(snapshots, window)).astype(best_params.dtype)
    if run_dir:
        write_metrics(Path(run_dir) / "metrics.csv", metrics)
        meta = dict(feature_dim=pair.feature_dim, num_classes=cfg.num_classes)
        save_checkpoint(checkpoint_dir / "best.npz", pair.target.architecture_id, best_params,
                        extra={"step": result.best_step}, **meta)
        if result.swad_params is not None:
            save_checkpoint(checkpoint_dir / "swad.npz", pair.target.architecture_id, result.swad_params,
                            extra={"window": list(result.swad_window)}, **meta)
    return result


def load_model_params(pair: OraclePair, g: Classifier, head: VariationalHead, params: np.ndarray) -> None:
    load_flat_parameters(trainable_modules(pair, g, head), params)


# -- oracle -----------------------------------------------------------------

def pretrain_oracle(cfg: TrainConfig) -> FeatureExtractor:
    """Desk-scale oracle: a tiny extractor briefly trained on synthetic shapes.

    The pretraining styles sit between the hues of the benchmark domains, so
    the oracle never sees a benchmark domain's style.
    """
    from .synthetic import SHAPES, SyntheticDomainSpec, generate_synthetic_domains

    torch.manual_seed(cfg.oracle_seed)
    extractor = build_extractor(cfg.architecture, width=cfg.tiny_width)
    if cfg.oracle_pretrain_steps == 0:
        return extractor
    spec = SyntheticDomainSpec(num_classes=len(SHAPES), samples_per_class=10, domain_color_shift=0.0625,
                               background_texture_seed=1000 + cfg.oracle_seed, base_hue=0.03125,
                               name_prefix="pretrain")
    domains = generate_synthetic_domains(spec, 16)
    samples = [s for d in domains for s in d.samples]
    store = ImageStore(cfg.image_size)
    aug = AugmentConfig.from_train_config(cfg, train_mode=False)
    head = Classifier(extractor.feature_dim, len(SHAPES), seed=cfg.oracle_seed)
    opt = torch.optim.Adam(list(extractor.parameters()) + list(head.parameters()), lr=cfg.oracle_pretrain_lr)
    rng = np.random.default_rng([cfg.oracle_seed, 3])
    extractor.train()
    for _ in range(cfg.oracle_pretrain_steps):
        idx = rng.choice(len(samples), size=cfg.batch_size, replace=False)
        x = image_tensor([samples[i].image_ref for i in idx], store, aug)
        y = torch.tensor([samples[i].label for i in idx])
        loss = F.cross_entropy(head(extractor(x)), y)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return extractor


def build_oracle(cfg: TrainConfig, cache_dir: Optional[Path] = None) -> FeatureExtractor:
    """Load the configured oracle, or pretrain (and cache) the desk-scale one."""
    if cfg.oracle_checkpoint:
        extractor = build_extractor(cfg.architecture, width=cfg.tiny_width)
        load_extractor_weights(extractor, Path(cfg.oracle_checkpoint))
        return extractor
    if cfg.architecture != "tiny_cnn":
        raise ValueError(f"architecture {cfg.architecture!r} needs oracle_checkpoint (no weights are bundled)")
    cache = None
    if cache_dir is not None:
        key = (f"oracle_{cfg.architecture}_w{cfg.tiny_width}_s{cfg.oracle_seed}_n{cfg.oracle_pretrain_steps}"
               f"_lr{cfg.oracle_pretrain_lr:g}_px{cfg.image_size}_b{cfg.batch_size}.npz")
        cache = Path(cache_dir) / key
        if cache.is_file():
            extractor = build_extractor(cfg.architecture, width=cfg.tiny_width)
            load_extractor_weights(extractor, cache)
            return extractor
    extractor = pretrain_oracle(cfg)
    if cache is not None:
        save_checkpoint(cache, extractor.architecture_id, flat_parameters(extractor.parameters()).numpy(),
                        extractor.feature_dim, 0)
    return extractor
