"""Command line entry point.

Subcommands: synth, train, evaluate, ablate, sweep, analyze,
export-embeddings.  Hyperparameters come from an optional ``--config``
key = value file plus repeatable ``--set key=value`` overrides; every run
writes a ``run-manifest.json`` capturing the fully resolved configuration.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__, dataio, evalkit, trainer
from .errors import ConfigError, HyperRecError
from .model import export_embeddings
from .trainer import TrainConfig

FORMAT_VERSIONS = {
    "checkpoint": trainer.CHECKPOINT_MAGIC.decode("ascii"),
    "features": dataio.FEATURE_MAGIC.decode("ascii"),
}


def parse_config_file(path: Path) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and ``#`` comments allowed."""
    overrides: dict[str, str] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}: line {line_no}: expected key = value")
        key, _, value = stripped.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def _set_pairs(args: argparse.Namespace) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def resolve_config(args: argparse.Namespace, base: TrainConfig | None = None) -> TrainConfig:
    cfg = TrainConfig() if base is None else base
    if getattr(args, "config", None):
        cfg = cfg.with_overrides(parse_config_file(Path(args.config)))
    return cfg.with_overrides(_set_pairs(args))


def write_manifest(out_dir: Path, command: str, cfg: TrainConfig, extra: dict) -> None:
    manifest = {
        "command": command,
        "config": asdict(cfg),
        "seed": cfg.seed,
        "format_versions": FORMAT_VERSIONS,
        "package_version": __version__,
    }
    manifest.update(extra)
    (out_dir / "run-manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(args) -> tuple[dataio.SplitDataset, dataio.VisualFeatureStore]:
    dataset = dataio.load_interactions(args.data)
    features = dataio.load_features(args.features)
    return dataio.chrono_split(dataset), features


def cmd_synth(args) -> int:
    out = _out_dir(args)
    cfg = resolve_config(args)
    dataset, store = dataio.synth_generate(
        users=args.users,
        items=args.items,
        interactions=args.interactions,
        skew=args.skew,
        seed=cfg.seed if args.seed is None else args.seed,
        feat_dim=args.feat_dim,
    )
    dataio.write_interactions_csv(dataset, out / "interactions.csv")
    dataio.write_features(out / "features.bin", store.rows)
    write_manifest(
        out,
        "synth",
        cfg,
        {
            "synth": {
                "users": args.users,
                "items": args.items,
                "interactions": args.interactions,
                "skew": args.skew,
                "feat_dim": args.feat_dim,
                "seed": cfg.seed if args.seed is None else args.seed,
            },
            "artifacts": ["interactions.csv", "features.bin"],
        },
    )
    print(f"wrote {out / 'interactions.csv'} ({dataset.n_users} users, "
          f"{dataset.n_items} items, {len(dataset.interactions)} interactions)")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = resolve_config(args)
    split, features = _load_split(args)
    with open(out / "losses.jsonl", "w", encoding="utf-8") as loss_stream:
        result = trainer.train(
            split, features, cfg, loss_stream=loss_stream, threads=args.threads
        )
    trainer.save_checkpoint(out / "checkpoint.bin", result.tables, cfg)
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    write_manifest(
        out,
        "train",
        cfg,
        {
            "data": str(args.data),
            "features": str(args.features),
            "best_epoch": result.best_epoch,
            "best_val_auc": result.best_val_auc,
            "diverged": result.diverged,
            "skipped_triplets": result.skipped_triplets,
            "artifacts": ["checkpoint.bin", "history.jsonl", "losses.jsonl"],
        },
    )
    print(f"best validation AUC {result.best_val_auc:.4f} at epoch {result.best_epoch}")
    if result.diverged:
        print("warning: training diverged; checkpoint holds the last good state",
              file=sys.stderr)
    return 0


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise HyperRecError(f"checkpoint not found: {checkpoint}")
    tables, cfg = trainer.load_checkpoint(checkpoint)
    cfg = resolve_config(args, base=cfg)
    split, features = _load_split(args)
    report = evalkit.evaluate(
        tables, split, features, cfg,
        which=args.split, wiring=trainer.apply_variant(cfg),
        neg_per_user=args.neg_per_user, threads=args.threads,
        exhaustive=args.exhaustive,
    )
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    write_manifest(
        out,
        "evaluate",
        cfg,
        {
            "checkpoint": str(checkpoint),
            "data": str(args.data),
            "features": str(args.features),
            "split": args.split,
            "artifacts": ["report.json", "report.txt"],
        },
    )
    print(report.to_text())
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    cfg = resolve_config(args)
    split, features = _load_split(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = evalkit.run_ablations(split, features, cfg, seeds=seeds, threads=args.threads)
    (out / "ablations.json").write_text(
        json.dumps(rows, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (out / "ablations.txt").write_text(
        evalkit.ablation_table_text(rows) + "\n", encoding="utf-8"
    )
    write_manifest(out, "ablate", cfg, {
        "data": str(args.data), "features": str(args.features),
        "artifacts": ["ablations.json", "ablations.txt"],
    })
    print(evalkit.ablation_table_text(rows))
    return 0


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    cfg = resolve_config(args)
    split, features = _load_split(args)
    values = [float(v) for v in args.values.split(",")]
    points = evalkit.sweep(split, features, cfg, args.param, values, threads=args.threads)
    (out / "sweep.json").write_text(
        json.dumps(points, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write(f"{args.param},auc\n")
        for point in points:
            fh.write(f"{point['value']!r},{point['auc']!r}\n")
    write_manifest(out, "sweep", cfg, {
        "data": str(args.data), "features": str(args.features),
        "param": args.param, "values": values,
        "artifacts": ["sweep.json", "sweep.csv"],
    })
    for point in points:
        print(f"{args.param}={point['value']}: AUC {point['auc']}")
    return 0


def cmd_analyze(args) -> int:
    out = _out_dir(args)
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise HyperRecError(f"checkpoint not found: {checkpoint}")
    tables, cfg = trainer.load_checkpoint(checkpoint)
    split, features = _load_split(args)
    analysis = evalkit.analyze_embeddings(
        tables, split, features, cfg, wiring=trainer.apply_variant(cfg)
    )
    (out / "analysis.json").write_text(analysis.to_json() + "\n", encoding="utf-8")
    evalkit.histogram_csv(analysis, out / "norm_histogram.csv")
    write_manifest(out, "analyze", cfg, {
        "checkpoint": str(checkpoint),
        "data": str(args.data), "features": str(args.features),
        "artifacts": ["analysis.json", "norm_histogram.csv"],
    })
    print(analysis.to_json())
    return 0


def cmd_export_embeddings(args) -> int:
    out = _out_dir(args)
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise HyperRecError(f"checkpoint not found: {checkpoint}")
    tables, cfg = trainer.load_checkpoint(checkpoint)
    dataset = dataio.load_interactions(args.data)
    features = dataio.load_features(args.features)
    split = dataio.chrono_split(dataset)
    history = dataio.build_history(split.train, dataset.n_users)
    path = out / "embeddings.tsv"
    export_embeddings(
        tables, dataset, history, features, path,
        c=cfg.curvature, limit=cfg.neighbors, seed=cfg.seed,
        wiring=trainer.apply_variant(cfg),
    )
    write_manifest(out, "export-embeddings", cfg, {
        "checkpoint": str(checkpoint),
        "data": str(args.data), "features": str(args.features),
        "artifacts": ["embeddings.tsv"],
    })
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperrec",
        description="Hyperbolic-space recommender: data generation, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, config=True):
        if data:
            p.add_argument("--data", required=True, help="interactions CSV")
            p.add_argument("--features", required=True, help="feature container")
        if config:
            p.add_argument("--config", help="key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker thread cap")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--interactions", type=int, default=10_000)
    p.add_argument("--skew", type=float, default=1.0)
    p.add_argument("--feat-dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=None,
                   help="generator seed (defaults to the config seed)")
    common(p, data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--neg-per-user", type=int, default=None)
    p.add_argument("--exhaustive", action="store_true",
                   help="use every available negative")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run all ablation variants")
    p.add_argument("--seeds", help="comma-separated seeds (default: seed..seed+2)")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep gamma or curvature")
    p.add_argument("--param", required=True, choices=evalkit.SWEEPABLE)
    p.add_argument("--values", required=True, help="comma-separated values")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="embedding norm analysis")
    p.add_argument("--checkpoint", required=True)
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export-embeddings", help="dump mapped coordinates as TSV")
    p.add_argument("--checkpoint", required=True)
    common(p)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (HyperRecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())
