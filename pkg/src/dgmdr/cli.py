"""Command-line entry point: ``dgmdr {train,benchmark,report,synth-data}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
3 missing data. Failures print one JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import yaml

from .augment import ImageLoadError
from .core import ConfigError, DataError, TrainConfig, discover_domains, resolve_data_root

log = logging.getLogger("dgmdr")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def load_config(path) -> TrainConfig:
    """Read a flat YAML key/value config; unknown keys and nested values are errors."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError({"config": f"file {path} not found"})
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError({"config": f"unparseable YAML: {exc}"}) from None
    if not isinstance(data, dict):
        raise ConfigError({"config": "top level must be a key/value mapping"})
    nested = {k: "nested values are not allowed" for k, v in data.items() if isinstance(v, dict)}
    if nested:
        raise ConfigError(nested)
    return TrainConfig.from_dict(data)


def apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    kw = {}
    if getattr(args, "lam", None) is not None:
        kw["lam"] = args.lam
    if getattr(args, "algorithm", None):
        kw["algorithm"] = args.algorithm
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    task = getattr(args, "task", None)
    if task:
        kw["task_mode"] = task
        if task == "binary":
            kw["num_classes"] = 2
        elif cfg.num_classes == 2:
            kw["num_classes"] = 5
    if not kw:
        return cfg
    try:
        return cfg.with_overrides(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError({"overrides": str(exc)}) from None


def _fail(code: int, kind: str, message: str, **extra) -> int:
    record = {"error": kind, "message": message, "exit_code": code}
    record.update(extra)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


# -- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    from .harness import run_dir_for, run_fold

    cfg = apply_overrides(load_config(args.config), args)
    out = Path(args.out)
    done = run_dir_for(out, cfg.name, args.target, cfg.seed) / "result.json"
    if done.is_file() and args.resume:
        log.info("%s exists; nothing to do", done)
        return EXIT_OK
    domains = discover_domains(resolve_data_root(args.data_root), cfg.domains)
    names = [d.name for d in domains]
    if args.target not in names:
        raise DataError(f"target domain {args.target!r} not among {names}")
    result = run_fold(cfg, domains, args.target, out, resume=args.resume)
    print(json.dumps({"target": args.target, "seed": cfg.seed, "accuracy": result["accuracy"],
                      "result": str(done)}))
    return EXIT_OK


def _load_matrix(path):
    from .harness import BenchmarkMatrix

    path = Path(path)
    if not path.is_file():
        raise ConfigError({"config": f"benchmark matrix {path} not found"})
    try:
        matrix = BenchmarkMatrix.load(path)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ConfigError({"config": f"bad benchmark matrix: {exc}"}) from None
    cfg_path = Path(matrix.config)
    if not cfg_path.is_absolute():
        cfg_path = path.parent / cfg_path
    return matrix, load_config(cfg_path)


def _reports(matrix, out: Path):
    from .harness import aggregate, collect_results

    reports = []
    for algo in matrix.algorithms:
        results = [r for r in collect_results(out, matrix.run_name(algo)) if r.seed in matrix.seeds]
        if not results:
            raise DataError(f"no results for algorithm {algo!r} under {out / matrix.run_name(algo)}")
        reports.append(aggregate(results, algo))
    return reports


def cmd_benchmark(args) -> int:
    from .harness import distribution_table, run_matrix, write_reports

    matrix, base = _load_matrix(args.config)
    base = apply_overrides(base, args)
    out = Path(args.out)
    data_root = resolve_data_root(args.data_root)
    domains = discover_domains(data_root, matrix.domains or base.domains)
    bench_dir = out / matrix.name
    bench_dir.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.config, bench_dir / "benchmark.json")
    for algo in matrix.algorithms:
        num_classes = 2 if matrix.task_mode == "binary" else (5 if base.num_classes == 2 else base.num_classes)
        cfg = base.with_overrides(algorithm=algo, task_mode=matrix.task_mode, num_classes=num_classes,
                                  name=matrix.run_name(algo))
        run_matrix(cfg, domains, matrix.seeds, out, jobs=args.jobs, resume=args.resume, data_root=data_root)
    reports = _reports(matrix, out)
    write_reports(reports, bench_dir)
    (bench_dir / "class_distribution.md").write_text(distribution_table(domains))
    print((bench_dir / "report.md").read_text(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    from .harness import emit_report, write_reports

    matrix, _ = _load_matrix(args.config)
    out = Path(args.out)
    reports = _reports(matrix, out)
    bench_dir = out / matrix.name
    bench_dir.mkdir(parents=True, exist_ok=True)
    write_reports(reports, bench_dir)
    print(emit_report(reports, args.format), end="")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    from .synthetic import SyntheticDomainSpec, generate_synthetic_domains

    out = Path(args.out)
    manifests = [out / f"{args.prefix}_{d}.csv" for d in range(args.num_domains)]
    if args.resume and all(m.is_file() for m in manifests):
        log.info("synthetic data already present under %s", out)
        return EXIT_OK
    try:
        spec = SyntheticDomainSpec(
            num_classes=args.num_classes,
            samples_per_class=args.samples_per_class,
            domain_color_shift=args.hue_shift,
            background_texture_seed=args.seed,
            image_size=args.image_size,
            name_prefix=args.prefix,
        )
    except ValueError as exc:
        raise ConfigError({"synth": str(exc)}) from None
    datasets = generate_synthetic_domains(spec, args.num_domains, out)
    print(json.dumps({"out": str(out), "domains": [d.name for d in datasets],
                      "samples_per_domain": len(datasets[0])}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgmdr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config_help):
        p.add_argument("--config", required=True, help=config_help)
        p.add_argument("--out", default="runs", help="output root (default: runs)")
        p.add_argument("--resume", action="store_true", help="skip work whose results already exist")

    def training(p):
        p.add_argument("--data-root", default=None, help="dataset root (default: $DGMDR_DATA_ROOT)")
        p.add_argument("--lambda", dest="lam", type=float, default=None, help="regularization weight")
        p.add_argument("--algorithm", choices=("erm", "dgmdr", "dgmdr_swad"), default=None)
        p.add_argument("--task", choices=("multiclass", "binary"), default=None)

    p = sub.add_parser("train", help="train and evaluate one LODO fold")
    common(p, config_help="flat YAML training config")
    training(p)
    p.add_argument("--target", required=True, help="held-out target domain")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", help="run the LODO x seeds matrix and aggregate")
    common(p, config_help="benchmark.json run matrix")
    training(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("report", help="re-render reports from stored results")
    common(p, config_help="benchmark.json run matrix")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth-data", help="write synthetic domains and manifests")
    p.add_argument("--out", required=True, help="data root to create")
    p.add_argument("--seed", type=int, default=0, help="texture/shape seed")
    p.add_argument("--num-domains", type=int, default=4)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--samples-per-class", type=int, default=50)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--hue-shift", type=float, default=0.25)
    p.add_argument("--prefix", default="synth")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "invalid_config", str(exc), fields=exc.field_errors)
    except (DataError, ImageLoadError) as exc:
        return _fail(EXIT_DATA, "missing_data", str(exc))
    except FileExistsError as exc:
        return _fail(EXIT_FAIL, "run_exists", str(exc))
    except Exception as exc:  # noqa: BLE001 - top-level record for any failure
        log.debug("unhandled error", exc_info=True)
        return _fail(EXIT_FAIL, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
