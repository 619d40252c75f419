"""Leave-one-domain-out orchestration, seed aggregation and report tables."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from .core import DomainDataset, FoldResult, TrainConfig, split_train_val, task_labels

log = logging.getLogger(__name__)

ALGORITHM_LABELS = {"erm": "ERM", "dgmdr": "DGM-DR", "dgmdr_swad": "DGM-DR + SWAD-simplified"}


def lodo_folds(domains: Sequence[DomainDataset]) -> list[tuple[list[DomainDataset], DomainDataset]]:
    if len(domains) < 2:
        raise ValueError("leave-one-domain-out needs at least 2 domains")
    names = [d.name for d in domains]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate domain names: {names}")
    return [([d for d in domains if d is not target], target) for target in domains]


def accuracy(predictions: Sequence, labels: Sequence) -> float:
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise ValueError("accuracy of an empty set")
    return sum(int(p == l) for p, l in zip(predictions, labels)) / len(labels)


@dataclass
class BenchmarkReport:
    algorithm: str
    domains: list[str]
    seeds: list[int]
    fold_accuracy: dict  # (domain, seed) -> accuracy
    domain_mean: dict  # domain -> mean over seeds
    seed_average: dict  # seed -> mean over domains
    average: float
    std: float
    notes: list[str] = field(default_factory=list)


def aggregate(fold_results: Sequence[FoldResult], algorithm: Optional[str] = None) -> BenchmarkReport:
    """Per-domain seed means, their average, and the sample std of per-seed averages."""
    if not fold_results:
        raise ValueError("no fold results")
    table = {}
    for r in fold_results:
        key = (r.target_domain, r.seed)
        if key in table:
            raise ValueError(f"duplicate fold result for target {r.target_domain!r}, seed {r.seed}")
        table[key] = r.accuracy
    domains = sorted({d for d, _ in table})
    seeds = sorted({s for _, s in table})
    gaps = [(d, s) for s in seeds for d in domains if (d, s) not in table]
    if gaps:
        listing = ", ".join(f"{d}/seed {s}" for d, s in gaps)
        raise ValueError(f"missing fold results: {listing}")
    domain_mean = {d: math.fsum(table[d, s] for s in seeds) / len(seeds) for d in domains}
    seed_average = {s: math.fsum(table[d, s] for d in domains) / len(domains) for s in seeds}
    average = math.fsum(domain_mean.values()) / len(domains)
    std = statistics.stdev(seed_average.values()) if len(seeds) > 1 else 0.0
    algorithm = algorithm or fold_results[0].algorithm
    return BenchmarkReport(algorithm, domains, seeds, table, domain_mean, seed_average, average, std)


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def emit_report(report, fmt: str = "markdown") -> str:
    """Render one report (or a list sharing the same domains) as markdown or CSV."""
    reports = report if isinstance(report, (list, tuple)) else [report]
    if fmt == "markdown":
        domains = reports[0].domains
        lines = ["| Algorithm | " + " | ".join(domains) + " | Average Accuracy |",
                 "|" + "---|" * (len(domains) + 2)]
        for r in reports:
            if r.domains != domains:
                raise ValueError("reports cover different domains")
            cells = [_pct(r.domain_mean[d]) for d in domains]
            label = ALGORITHM_LABELS.get(r.algorithm, r.algorithm)
            lines.append(f"| {label} | " + " | ".join(cells) + f" | {_pct(r.average)}±{_pct(r.std)} |")
        lines.append("")
        lines.append("Accuracy in %; ± is the sample standard deviation (n-1) of per-seed averages.")
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["algorithm", "domain", "seed", "accuracy"])
        for r in reports:
            for d in r.domains:
                for s in r.seeds:
                    w.writerow([r.algorithm, d, s, _pct(r.fold_accuracy[d, s])])
        return buf.getvalue()
    raise ValueError(f"unknown report format {fmt!r}")


# -- running folds ----------------------------------------------------------

def run_dir_for(out_root: Path, name: str, target: str, seed: int) -> Path:
    return Path(out_root) / name / f"fold_{target}" / f"seed_{seed}"


def write_config_snapshot(cfg: TrainConfig, path: Path) -> None:
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def run_fold(cfg: TrainConfig, domains: Sequence[DomainDataset], target: str, out_root: Path,
             store=None, resume: bool = False) -> dict:
    """Train on all domains but ``target``, evaluate on the whole target domain.

    Writes ``config.snapshot``, ``metrics.csv``, ``checkpoints/`` and
    ``result.json`` under ``<out_root>/<name>/fold_<target>/seed_<seed>/``.
    """
    from .augment import AugmentConfig, ImageStore
    from .encoder import Classifier, init_target_from_oracle, parameter_checksum
    from .mi_reg import VariationalHead
    from .swad import SWAD_LABEL
    from .trainer import build_oracle, evaluate, load_model_params, train_run

    run_dir = run_dir_for(out_root, cfg.name, target, cfg.seed)
    result_path = run_dir / "result.json"
    if result_path.is_file():
        if resume:
            log.info("%s already complete; skipping", run_dir)
            return json.loads(result_path.read_text())
        raise FileExistsError(f"{run_dir} already holds a finished run; pass --resume to reuse it")

    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    by_name = {d.name: d for d in domains}
    if target not in by_name:
        raise KeyError(f"unknown target domain {target!r}; have {sorted(by_name)}")
    prepared = [task_labels(d, cfg.task_mode) for d in domains]
    sources = [split_train_val(d, cfg.seed) for d in prepared if d.name != target]
    target_ds = next(d for d in prepared if d.name == target)
    if cfg.batch_size < len(sources):
        raise ValueError(f"batch_size {cfg.batch_size} < number of source domains {len(sources)}")

    run_dir.mkdir(parents=True, exist_ok=True)
    write_config_snapshot(cfg, run_dir / "config.snapshot")
    store = store or ImageStore(cfg.image_size)

    oracle = build_oracle(cfg, cache_dir=Path(out_root) / "oracle_cache")
    pair = init_target_from_oracle(oracle)
    g = Classifier(pair.feature_dim, cfg.num_classes, seed=cfg.seed)
    head = VariationalHead(pair.feature_dim)
    oracle_sum = parameter_checksum(pair.oracle)

    trained = train_run(cfg, sources, pair, g, head, store=store, run_dir=run_dir)
    oracle_after = parameter_checksum(pair.oracle)
    if oracle_after != oracle_sum:
        raise RuntimeError("oracle parameters changed during training")

    aug_eval = AugmentConfig.from_train_config(cfg, train_mode=False)
    target_samples = list(target_ds.samples)
    load_model_params(pair, g, head, trained.best_params)
    selected = evaluate(pair.target, g, target_samples, store, aug_eval, cfg.num_classes)
    result = {
        "algorithm": cfg.algorithm,
        "target_domain": target,
        "seed": cfg.seed,
        "task_mode": cfg.task_mode,
        "selected_step": trained.best_step,
        "val_accuracy": trained.best_val_accuracy,
        "selected_accuracy": selected["accuracy"],
        "accuracy": selected["accuracy"],
        "per_class_accuracy": selected["per_class_accuracy"],
        "correct": selected["correct"],
        "total": selected["total"],
        "oracle_checksum": oracle_sum,
        "oracle_checksum_after": oracle_after,
        "normalization": {"mean": list(cfg.norm_mean), "std": list(cfg.norm_std)},
    }
    if trained.swad_params is not None:
        load_model_params(pair, g, head, trained.swad_params)
        swad = evaluate(pair.target, g, target_samples, store, aug_eval, cfg.num_classes)
        delta = swad["accuracy"] - selected["accuracy"]
        result["swad"] = {
            "label": SWAD_LABEL,
            "window": list(trained.swad_window),
            "accuracy": swad["accuracy"],
            "per_class_accuracy": swad["per_class_accuracy"],
            "delta_vs_selected": delta,
        }
        log.info("%s: %s accuracy %.4f vs selected %.4f (delta %+.4f)",
                 run_dir, SWAD_LABEL, swad["accuracy"], selected["accuracy"], delta)
        if cfg.algorithm == "dgmdr_swad":
            result["accuracy"] = swad["accuracy"]
            result["per_class_accuracy"] = swad["per_class_accuracy"]
            result["correct"] = swad["correct"]
    result_path.write_text(json.dumps(result, indent=2, sort_keys=True, default=_json_default) + "\n")
    return result


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def fold_result_from_json(data: dict) -> FoldResult:
    return FoldResult(
        target_domain=data["target_domain"],
        seed=int(data["seed"]),
        accuracy=float(data["accuracy"]),
        selected_step=int(data["selected_step"]),
        per_class_accuracy=tuple(data.get("per_class_accuracy", ())),
        algorithm=data.get("algorithm", "dgmdr"),
    )


def _fold_job(args):
    cfg_dict, data_root, domain_names, target, out_root, resume = args
    from .core import discover_domains

    cfg = TrainConfig.from_dict(cfg_dict)
    domains = discover_domains(Path(data_root), domain_names)
    return run_fold(cfg, domains, target, Path(out_root), resume=resume)


def run_matrix(cfg: TrainConfig, domains: Sequence[DomainDataset], seeds: Sequence[int], out_root: Path,
               jobs: int = 1, resume: bool = False, data_root: Optional[Path] = None) -> list[dict]:
    """All LODO folds for every seed. ``jobs > 1`` uses worker processes (needs ``data_root``)."""
    from .augment import ImageStore
    from .trainer import build_oracle

    folds = lodo_folds(domains)
    # pretrain the shared oracle once, before any worker starts
    build_oracle(cfg, cache_dir=Path(out_root) / "oracle_cache")
    tasks = [(cfg.with_overrides(seed=s), target.name) for s in seeds for _, target in folds]
    if jobs > 1 and data_root is not None:
        names = [d.name for d in domains]
        args = [(c.to_dict(), str(data_root), names, t, str(out_root), resume) for c, t in tasks]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_fold_job, args))
    store = ImageStore(cfg.image_size)
    return [run_fold(c, domains, t, out_root, store=store, resume=resume) for c, t in tasks]


def collect_results(out_root: Path, name: str) -> list[FoldResult]:
    paths = sorted((Path(out_root) / name).glob("fold_*/seed_*/result.json"))
    return [fold_result_from_json(json.loads(p.read_text())) for p in paths]


@dataclass
class BenchmarkMatrix:
    name: str
    config: str
    algorithms: list[str]
    seeds: list[int]
    task_mode: str = "multiclass"
    domains: list[str] = field(default_factory=list)

    @classmethod
    def load(cls, path: Path) -> "BenchmarkMatrix":
        data = json.loads(Path(path).read_text())
        allowed = {"name", "config", "algorithms", "seeds", "task_mode", "domains"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            from .core import ConfigError

            raise ConfigError({k: "unknown key" for k in unknown})
        return cls(**data)

    def run_name(self, algorithm: str) -> str:
        return f"{self.name}-{algorithm}-{self.task_mode}"


def write_reports(reports: Sequence[BenchmarkReport], directory: Path) -> None:
    directory = Path(directory)
    (directory / "report.md").write_text(emit_report(list(reports), "markdown"))
    (directory / "report.csv").write_text(emit_report(list(reports), "csv"))


def distribution_table(domains: Sequence[DomainDataset]) -> str:
    """Markdown table of per-domain grade percentages and totals."""
    from .core import GRADE_NAMES, class_distribution

    lines = ["| Dataset | " + " | ".join(GRADE_NAMES) + " | Total # of Images |",
             "|" + "---|" * (len(GRADE_NAMES) + 2)]
    for d in domains:
        cells = [f"{100 * frac:.2f}%" for _, frac in class_distribution(d)]
        lines.append(f"| {d.name} | " + " | ".join(cells) + f" | {len(d)} |")
    return "\n".join(lines) + "\n"
