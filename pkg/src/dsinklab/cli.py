"""Command-line front end for the full pipeline.

Commands: gen-data, train-aux, train --arm <arm>, report. One flat key=value
config file (sections dataset.*, train.*, aux.*) drives every command; each
command consumes the sections it needs and ignores the rest. Artifact paths
default to conventional names under --out-dir and can be overridden from the
config.

Exit codes: 0 success, 2 config error, 3 I/O or checksum error, 4 numerical
abort. Failures print one machine-parseable line: `error[<code>]: <message>`.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .auxiliaries import (
    cache_predictions,
    load_cache,
    save_cache,
    train_imbalance_robust,
    train_noise_robust,
)
from .errors import (
    ConfigError,
    DsinkLabError,
    MalformedFileError,
    NumericalBreakdownError,
    TrainingDivergedError,
)
from .evalmetrics import REPORT_COLUMNS, EvalReport, make_report, noise_correction_rate
from .models import forward, load_checkpoint, save_checkpoint
from .synthdata import (
    SPLIT_TEST,
    SPLIT_TRAIN,
    DatasetRecipe,
    generate,
    load,
    measure_ir,
    measure_nr,
    save,
)
from .trainer import ARMS, ExperimentConfig, TrainingLog, ensemble_probs, train_arm

_METRIC_COLUMNS = REPORT_COLUMNS[2:-1]  # numeric metrics between arm/seed and recipe

_DATASET_KEYS = {
    "num_classes": int,
    "base_per_class": int,
    "imbalance_ratio": float,
    "noise_mode": str,
    "noise_ratio": float,
    "feature_dim": int,
    "class_separation": float,
    "seed": int,
}

_TRAIN_KEYS = {
    "alpha": float,
    "sinkhorn_iters": int,
    "ot_lambda": float,
    "batch_size": int,
    "epochs": int,
    "lr": float,
    "lr_decay_factor": float,
    "lr_decay_start": int,
    "lr_decay_every": int,
    "momentum": float,
    "weight_decay": float,
    "seed": int,
    "arm": str,
    "base_loss": str,
    "arch": str,
    "hidden_width": int,
    "dataset_path": str,
    "test_dataset_path": str,
    "cache_path": str,
    "imbalance_ckpt_path": str,
    "noise_ckpt_path": str,
}

_AUX_KEYS = {
    "arch": ("aux_arch", str),
    "epochs": ("aux_epochs", int),
    "warmup_frac": ("aux_warmup_frac", float),
    "nr_estimate": ("aux_nr_estimate", float),
}


def parse_config(path) -> tuple[DatasetRecipe, ExperimentConfig]:
    """Parse the flat key=value config into a recipe and an experiment config."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc

    dataset_fields, train_fields, aux_fields = {}, {}, {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        try:
            if section == "dataset" and name in _DATASET_KEYS:
                dataset_fields[name] = _DATASET_KEYS[name](value)
            elif section == "train" and name in _TRAIN_KEYS:
                train_fields[name] = _TRAIN_KEYS[name](value)
            elif section == "aux" and name in _AUX_KEYS:
                attr, conv = _AUX_KEYS[name]
                train_fields[attr] = conv(value)
            else:
                raise ConfigError(f"{path}:{line_no}: invalid config key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"{path}:{line_no}: bad value for {key!r}: {exc}") from exc

    if "num_classes" not in dataset_fields:
        raise ConfigError(f"{path}: missing required key dataset.num_classes")
    recipe = DatasetRecipe(**dataset_fields)
    try:
        recipe.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig(**train_fields)
    cfg.validate()
    return recipe, cfg


@dataclass
class ArtifactPaths:
    train_dataset: Path
    test_dataset: Path
    cache: Path
    imbalance_ckpt: Path
    noise_ckpt: Path
    results: Path
    manifest: Path
    out_dir: Path

    def log(self, arm: str, seed: int) -> Path:
        return self.out_dir / f"log-{arm}-seed{seed}.csv"

    def checkpoint(self, arm: str, seed: int) -> Path:
        return self.out_dir / f"checkpoint-{arm}-seed{seed}.ckpt"


def resolve_paths(out_dir, cfg: ExperimentConfig) -> ArtifactPaths:
    out = Path(out_dir)
    return ArtifactPaths(
        train_dataset=Path(cfg.dataset_path) if cfg.dataset_path else out / "dataset-train.dsnk",
        test_dataset=Path(cfg.test_dataset_path) if cfg.test_dataset_path
        else out / "dataset-test.dsnk",
        cache=Path(cfg.cache_path) if cfg.cache_path else out / "aux-cache.dskc",
        imbalance_ckpt=Path(cfg.imbalance_ckpt_path) if cfg.imbalance_ckpt_path
        else out / "aux-imbalance.ckpt",
        noise_ckpt=Path(cfg.noise_ckpt_path) if cfg.noise_ckpt_path else out / "aux-noise.ckpt",
        results=out / "results.csv",
        manifest=out / "manifest.json",
        out_dir=out,
    )


def _update_manifest(paths: ArtifactPaths, config_path, cfg, artifacts: dict):
    manifest = {}
    if paths.manifest.exists():
        try:
            manifest = json.loads(paths.manifest.read_text())
        except (OSError, json.JSONDecodeError):
            manifest = {}
    manifest.setdefault("artifacts", {})
    manifest["tool_version"] = __version__
    manifest["config_path"] = str(config_path)
    manifest["resolved_config"] = {k: repr(v) for k, v in vars(cfg).items()}
    for name, path in artifacts.items():
        data = Path(path).read_bytes()
        manifest["artifacts"][name] = {
            "path": str(path),
            "crc32": f"{zlib.crc32(data) & 0xFFFFFFFF:#010x}",
            "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
    paths.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    recipe, cfg = parse_config(args.config)
    if args.seed is not None:
        recipe.seed = args.seed
    paths = resolve_paths(args.out_dir, cfg)
    paths.out_dir.mkdir(parents=True, exist_ok=True)

    train_ds = generate(recipe, SPLIT_TRAIN)
    test_ds = generate(recipe, SPLIT_TEST)
    save(train_ds, paths.train_dataset)
    save(test_ds, paths.test_dataset)
    _update_manifest(paths, args.config, cfg, {
        "dataset_train": paths.train_dataset,
        "dataset_test": paths.test_dataset,
    })
    print(f"train dataset: {paths.train_dataset} "
          f"(N={train_ds.num_samples}, C={train_ds.num_classes}, d={train_ds.feature_dim})")
    print(f"test dataset:  {paths.test_dataset} (N={test_ds.num_samples}, class-balanced)")
    print(f"measured IR: {measure_ir(train_ds):.4f} (configured {recipe.imbalance_ratio})")
    print(f"measured NR: {measure_nr(train_ds):.4f} (configured {recipe.noise_ratio})")
    return 0


def cmd_train_aux(args) -> int:
    _, cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    paths = resolve_paths(args.out_dir, cfg)
    ds = load(paths.train_dataset)

    imbalance_params = train_imbalance_robust(ds, cfg)
    noise_params = train_noise_robust(ds, cfg)
    cache = cache_predictions(imbalance_params, noise_params, ds,
                              config_echo=f"seed={cfg.seed};aux_epochs={cfg.aux_epochs}")
    save_checkpoint(imbalance_params, paths.imbalance_ckpt)
    save_checkpoint(noise_params, paths.noise_ckpt)
    save_cache(cache, paths.cache)
    _update_manifest(paths, args.config, cfg, {
        "aux_cache": paths.cache,
        "aux_imbalance_ckpt": paths.imbalance_ckpt,
        "aux_noise_ckpt": paths.noise_ckpt,
    })
    print(f"prediction cache: {paths.cache} (bound to dataset CRC {cache.dataset_crc:#010x})")
    print(f"teacher checkpoints: {paths.imbalance_ckpt}, {paths.noise_ckpt}")
    return 0


def _append_report_row(results_path: Path, report: EvalReport):
    new_file = not results_path.exists()
    with results_path.open("a") as fh:
        if new_file:
            fh.write(",".join(REPORT_COLUMNS) + "\n")
        fh.write(report.to_csv_row())


def cmd_train(args) -> int:
    _, cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.arm is not None:
        if args.arm not in ARMS:
            raise ConfigError(f"unknown arm {args.arm!r}; valid arms: {', '.join(ARMS)}")
        cfg.arm = args.arm
    cfg.debug_invariants = cfg.debug_invariants or args.debug_invariants
    paths = resolve_paths(args.out_dir, cfg)

    ds = load(paths.train_dataset)
    test_ds = load(paths.test_dataset)
    cache = load_cache(paths.cache)
    cache.verify_binding(ds)

    params, log = train_arm(ds, cache, cfg, test_ds)

    if cfg.arm == "ensemble":
        imbalance_params = load_checkpoint(paths.imbalance_ckpt)
        noise_params = load_checkpoint(paths.noise_ckpt)
        test_probs = ensemble_probs(imbalance_params, noise_params, test_ds.features)
        train_probs = ensemble_probs(imbalance_params, noise_params, ds.features)
        artifacts = {}
    else:
        test_probs = forward(params, test_ds.features)
        train_probs = forward(params, ds.features)
        ckpt_path = paths.checkpoint(cfg.arm, cfg.seed)
        save_checkpoint(params, ckpt_path)
        log.checkpoint_path = str(ckpt_path)
        artifacts = {f"checkpoint_{cfg.arm}_seed{cfg.seed}": ckpt_path}

    noisy = np.any(ds.observed_labels != ds.true_labels)
    ncr = noise_correction_rate(train_probs, ds) if noisy else np.nan
    report = make_report(cfg.arm, cfg.seed, test_probs, test_ds.true_labels,
                         ds.class_counts, ncr, ds.recipe.echo_compact())

    log_path = paths.log(cfg.arm, cfg.seed)
    log.write_csv(log_path)
    _append_report_row(paths.results, report)
    artifacts[f"log_{cfg.arm}_seed{cfg.seed}"] = log_path
    _update_manifest(paths, args.config, cfg, artifacts)

    print(f"arm {cfg.arm} (seed {cfg.seed}): overall {report.overall_acc:.2f}% | "
          f"many {report.many_acc:.2f} / medium {report.medium_acc:.2f} / few {report.few_acc:.2f} | "
          f"macro-F1 {report.macro_f1:.4f} | AUC {report.macro_auc:.4f} | NCR {ncr:.4f}")
    print(f"report row appended to {paths.results}")
    return 0


def _read_results(path) -> list[EvalReport]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MalformedFileError(f"cannot read results table {path}: {exc}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise MalformedFileError(f"{path}: results table is empty")
    if tuple(rows[0]) != REPORT_COLUMNS:
        raise MalformedFileError(f"{path}: line 1: unexpected header")
    reports = [EvalReport.from_csv_fields(row, line_no) for line_no, row in
               enumerate(rows[1:], start=2)]
    if not reports:
        raise MalformedFileError(f"{path}: results table has no data rows")
    return reports


def _emit_curves(out_dir: Path, curves_path: Path):
    """Aggregate per-epoch test accuracy from training logs into one CSV."""
    series = {}
    for log_path in sorted(out_dir.glob("log-*-seed*.csv")):
        arm = log_path.stem[len("log-"):].rsplit("-seed", 1)[0]
        log = TrainingLog.from_csv(log_path.read_text(), path=str(log_path))
        for record in log.records:
            series.setdefault((arm, record.epoch), []).append(record.test_balanced_acc)
    if not series:
        return False
    with curves_path.open("w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["arm", "epoch", "mean_test_acc", "std_test_acc", "n_seeds"])
        for (arm, epoch) in sorted(series, key=lambda k: (k[0], k[1])):
            vals = np.asarray(series[(arm, epoch)], dtype=np.float64)
            writer.writerow([arm, epoch, repr(float(np.mean(vals))),
                             repr(float(np.std(vals))), len(vals)])
    return True


def cmd_report(args) -> int:
    results_path = args.results if args.results else Path(args.out_dir) / "results.csv"
    reports = _read_results(results_path)

    by_arm = {}
    for rep in reports:
        by_arm.setdefault(rep.arm, []).append(rep)

    header = f"{'arm':14s} {'seeds':>5s}"
    for col in _METRIC_COLUMNS:
        header += f" {col:>21s}"
    print(header)
    means = {}
    for arm in sorted(by_arm):
        rows = by_arm[arm]
        line = f"{arm:14s} {len(rows):5d}"
        means[arm] = {}
        for col in _METRIC_COLUMNS:
            vals = np.asarray([getattr(r, col) for r in rows], dtype=np.float64)
            mean, std = float(np.nanmean(vals)), float(np.nanstd(vals))
            means[arm][col] = mean
            line += f" {mean:12.4f} ±{std:7.4f}"
        print(line)

    if "dsink" in means and "ce" in means:
        line = f"{'dsink - ce':14s} {'':5s}"
        for col in _METRIC_COLUMNS:
            line += f" {means['dsink'][col] - means['ce'][col]:+12.4f} {'':8s}"
        print(line)

    curves_path = Path(args.out_dir) / "curves.csv"
    if _emit_curves(Path(args.out_dir), curves_path):
        print(f"per-epoch accuracy curves written to {curves_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsinklab",
        description="Synthetic lab for dual-granularity transport distillation "
                    "on long-tailed noisy data.",
    )
    parser.add_argument("--version", action="version", version=f"dsinklab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="path to key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out-dir", default="runs", help="artifact directory (default: runs)")
        p.add_argument("--debug-invariants", action="store_true",
                       help="enable in-loop marginal assertions")

    common(sub.add_parser("gen-data", help="generate and persist the train/test datasets"))
    common(sub.add_parser("train-aux", help="train both teachers, cache their predictions"))
    p_train = sub.add_parser("train", help="train one arm and append its report row")
    common(p_train)
    p_train.add_argument("--arm", default=None,
                         help=f"arm to train ({', '.join(ARMS)}); overrides the config")
    p_report = sub.add_parser("report", help="summarize a results table, emit curve CSVs")
    common(p_report, needs_config=False)
    p_report.add_argument("--results", default=None,
                          help="results table path (default: <out-dir>/results.csv)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train-aux": cmd_train_aux,
        "train": cmd_train,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except (NumericalBreakdownError, TrainingDivergedError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return 4
    except (MalformedFileError, OSError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 3
    except DsinkLabError as exc:
        print(f"error[internal]: {exc}", file=sys.stderr)
        return 1


def entrypoint():
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
