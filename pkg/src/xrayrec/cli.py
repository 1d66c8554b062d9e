"""Command line interface.

Subcommands: stats, synth, train, eval, ablate, curves. Exit codes: 0 on
success, 1 for configuration/user errors (including bad usage), 2 for
internal errors. Every run is idempotent with respect to its output
directory for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as config_mod
from . import evaluation, training
from .datasets import CLASSES, label_distribution, load_manifest, scale_histogram
from .errors import ConfigError
from .synth import synth_dataset

STATS_SCHEMA = "xrayrec-stats-v1"


class _Parser(argparse.ArgumentParser):
    """argparse maps usage problems to exit code 2; we want 1 (user error)."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xrayrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command", parser_class=_Parser)

    p = sub.add_parser("stats", help="label distribution and object-scale histograms")
    p.add_argument("dataset_dir", help="dataset root containing <split>/index.csv")
    p.add_argument("--split", default="train")
    p.add_argument("--bin-width", type=float, default=10.0, help="scale histogram bin width in pixels")
    p.add_argument("--hist", action="store_true", help="require scale histograms (fails without annotations)")
    p.add_argument("--out", default=None, help="report directory (default <dataset>/stats_<split>)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="synth config JSON (single split or per-split sections)")
    p.add_argument("--out", required=True, help="dataset root to write splits into")
    p.add_argument("--seed", type=int, default=None, help="override every split's rng_seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a classifier from an experiment config")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", default=None, help="override the config's out_dir")
    p.add_argument("--seed", type=int, default=None, help="override train.rng_seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset root")
    p.add_argument("--split", default="test")
    p.add_argument("--convention", choices=evaluation.AP_CONVENTIONS, default="continuous")
    p.add_argument("--input-scale", type=int, default=None, help="override the checkpoint's input scale")
    p.add_argument("--crop-scale", type=int, default=None, help="override the checkpoint's crop scale")
    p.add_argument("--out", default=None, help="report directory (default <checkpoint dir>/eval_<split>)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid (base config + row overrides)")
    p.add_argument("--config", required=True, help="grid config JSON")
    p.add_argument("--out", default=None, help="results directory (default alongside the grid file)")
    p.add_argument("--workers", type=int, default=1, help="parallel row processes (rows are independent)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("curves", help="render P-R curve CSVs to a raster plot")
    p.add_argument("report_dir", help="directory containing pr_<class>.csv files")
    p.add_argument("--out", default=None, help="output image path (default <report_dir>/pr_curves.png)")
    p.set_defaults(func=cmd_curves)

    return parser


def cmd_stats(args) -> int:
    manifest = load_manifest(args.dataset_dir, args.split)
    dist = label_distribution(manifest)
    print(f"dataset {manifest.name} split {manifest.split}: {dist.total} images")
    for name in CLASSES:
        print(f"  {name:<9} {dist.counts[name]:>8}  {dist.percentages[name]:6.2f}%")
    print(f"  {'negative':<9} {dist.negative_count:>8}  {dist.negative_percentage:6.2f}%")

    out_dir = Path(args.out) if args.out else Path(args.dataset_dir) / f"stats_{args.split}"
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"schema": STATS_SCHEMA, "dataset": manifest.name, "split": manifest.split,
              "label_distribution": dist.to_dict()}

    if args.hist and not manifest.has_boxes:
        raise ConfigError("scale histograms require annotations (annotations.csv missing or empty)")
    if manifest.has_boxes:
        histograms = scale_histogram(manifest, args.bin_width)
        report["scale_histograms"] = {}
        for name, hist in histograms.items():
            path = out_dir / f"scale_hist_{name}.csv"
            with open(path, "w") as f:
                f.write("bin_start,bin_end,count\n")
                for k, count in enumerate(hist.counts):
                    f.write(f"{hist.edges[k]:g},{hist.edges[k + 1]:g},{int(count)}\n")
            report["scale_histograms"][name] = {
                "bin_width": hist.bin_width,
                "counts": hist.counts.tolist(),
                "total": hist.total,
            }
            print(f"  scale histogram for {name}: {hist.total} boxes -> {path}")

    report_path = out_dir / "stats_report.json"
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"report written to {report_path}")
    return 0


def cmd_synth(args) -> int:
    configs = config_mod.load_synth_config(args.config)
    root = Path(args.out)
    for split, synth_config in configs.items():
        if args.seed is not None:
            synth_config.rng_seed = args.seed
        manifest = synth_dataset(synth_config, root / split)
        dist = label_distribution(manifest) if len(manifest) else None
        print(f"split {split}: {len(manifest)} images -> {root / split}")
        if dist is not None:
            counts = "  ".join(f"{name}={dist.counts[name]}" for name in CLASSES)
            print(f"  positives: {counts}  negative={dist.negative_count}")
    return 0


def _resolve_experiment(args) -> config_mod.ExperimentConfig:
    raw = config_mod._load_json(args.config)
    if args.seed is not None:
        raw = config_mod.deep_merge(raw, {"train": {"rng_seed": args.seed}})
    if getattr(args, "out", None):
        raw = config_mod.deep_merge(raw, {"out_dir": args.out})
    return config_mod.experiment_from_dict(raw)


def cmd_train(args) -> int:
    experiment = _resolve_experiment(args)
    if not experiment.out_dir:
        raise ConfigError("no output directory: set out_dir in the config or pass --out")
    config_mod.ensure_dataset(experiment)
    train_manifest, eval_manifest = config_mod.load_row_manifests(experiment)
    print(
        f"training on {len(train_manifest)} images "
        f"(config hash {experiment.config_hash}, seed {experiment.train.rng_seed})"
    )
    result = training.train(
        experiment.train,
        train_manifest,
        eval_manifest,
        out_dir=experiment.out_dir,
        config_hash=experiment.config_hash,
        raw_config=experiment.raw,
    )
    if result.log.epochs:
        last = result.log.epochs[-1]
        print(f"final epoch {last.epoch}: mean loss {last.mean_loss:.4f}")
    if result.best_map is not None:
        print(f"best eval mAP {result.best_map:.4f} -> {result.best_checkpoint}")
    print(f"final checkpoint -> {result.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.dataset, args.split)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}"
    report, _ = evaluation.evaluate(
        args.checkpoint,
        manifest,
        out_dir=out_dir,
        input_scale=args.input_scale,
        crop_scale=args.crop_scale,
        convention=args.convention,
    )
    for name in CLASSES:
        ap = report.per_class_ap[name]
        print(f"  AP {name:<9} {'undefined' if ap is None else f'{ap:.4f}'}")
    print(f"mAP {report.mean_ap:.4f} over {report.n_eval} images ({report.convention})")
    print(f"report written to {out_dir}")
    return 0


def cmd_ablate(args) -> int:
    grid = config_mod.load_grid(args.config)
    out_dir = Path(args.out) if args.out else Path(args.config).parent / "ablation"
    results = evaluation.ablation_run(grid, out_dir=out_dir, max_workers=args.workers)
    print(evaluation.format_ablation_table(results), end="")
    print(f"results written to {out_dir}")
    return 1 if any(row["error"] for row in results) else 0


def cmd_curves(args) -> int:
    out_path = evaluation.render_pr_curves(args.report_dir, args.out)
    print(f"curve plot written to {out_path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive catch-all
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
