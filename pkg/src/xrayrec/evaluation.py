"""Ranked-retrieval evaluation: P-R curves, average precision, mAP, ablations.

AP uses the continuous convention by default: sort by descending score with
ties broken by stable input order, then average precision-at-rank over the
positive ranks. The 11-point interpolated variant is available behind the
convention flag and is reported alongside in ablation tables, since the two
conventions can differ materially.

Classes with zero positives in the evaluation set have undefined AP; they are
reported as None and excluded from mAP with a loud warning, never scored 0.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import eval_transform
from .datasets import CLASSES, DatasetManifest, ImageStore
from .errors import ConfigError
from .model import Classifier, class_scores, load_checkpoint

APREPORT_SCHEMA = "xrayrec-apreport-v1"
AP_CONVENTIONS = ("continuous", "voc11")


@dataclass
class PRCurve:
    """Precision/recall along the ranking; thresholds descend, recall never falls."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def __len__(self) -> int:
        return len(self.thresholds)


def _check_scores_labels(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.ndim != 1 or len(scores) != len(labels):
        raise ConfigError(f"scores and labels must be equal-length vectors, got {scores.shape} vs {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ConfigError("labels must be binary")
    if labels.sum() == 0:
        raise ConfigError("AP is undefined without positive labels")
    return scores, labels.astype(np.int64)


def pr_curve(scores: np.ndarray, labels: np.ndarray) -> PRCurve:
    """Precision TP(k)/k and recall TP(k)/P at every rank k of the sorted scores."""
    scores, labels = _check_scores_labels(scores, labels)
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    tp = np.cumsum(ranked)
    ranks = np.arange(1, len(scores) + 1)
    return PRCurve(
        thresholds=scores[order],
        precision=tp / ranks,
        recall=tp / labels.sum(),
    )


def average_precision(scores: np.ndarray, labels: np.ndarray, convention: str = "continuous") -> float:
    """AP in [0, 1]; rank-based, so invariant to strictly increasing score transforms."""
    if convention not in AP_CONVENTIONS:
        raise ConfigError(f"convention must be one of {AP_CONVENTIONS}, got {convention!r}")
    scores, labels = _check_scores_labels(scores, labels)
    curve = pr_curve(scores, labels)
    order = np.argsort(-scores, kind="stable")
    positive_ranks = labels[order] == 1
    if convention == "continuous":
        return float(curve.precision[positive_ranks].sum() / labels.sum())
    # VOC 11-point: mean over recall anchors of the best precision at or past
    # that recall (0 where unreachable).
    anchors = np.linspace(0.0, 1.0, 11)
    interpolated = []
    for r in anchors:
        reachable = curve.recall >= r - 1e-12
        interpolated.append(curve.precision[reachable].max() if reachable.any() else 0.0)
    return float(np.mean(interpolated))


@dataclass
class APReport:
    """Per-class AP plus mAP; undefined classes carry None and are excluded."""

    per_class_ap: dict[str, float | None]
    mean_ap: float | None
    n_eval: int
    config_hash: str | None = None
    convention: str = "continuous"
    dataset: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema": APREPORT_SCHEMA,
            "per_class_ap": self.per_class_ap,
            "mean_ap": self.mean_ap,
            "n_eval": self.n_eval,
            "config_hash": self.config_hash,
            "convention": self.convention,
            "dataset": self.dataset,
        }


def write_ap_report(path: str | Path, report: APReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_ap_report(path: str | Path) -> APReport:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"report file not found: {path}")
    with open(path) as f:
        raw = json.load(f)
    if raw.get("schema") != APREPORT_SCHEMA:
        raise ConfigError(f"not a recognized AP report (expected schema {APREPORT_SCHEMA}): {path}")
    return APReport(
        per_class_ap=raw["per_class_ap"],
        mean_ap=raw["mean_ap"],
        n_eval=raw["n_eval"],
        config_hash=raw.get("config_hash"),
        convention=raw.get("convention", "continuous"),
        dataset=raw.get("dataset"),
    )


def evaluate_scores(
    scores: np.ndarray,
    labels: np.ndarray,
    convention: str = "continuous",
    config_hash: str | None = None,
    dataset: str | None = None,
) -> tuple[APReport, dict[str, PRCurve]]:
    """Per-class AP/curves and mAP from an (N, 5) score and label matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2 or scores.shape[1] != len(CLASSES):
        raise ConfigError(f"expected (N, {len(CLASSES)}) scores and labels, got {scores.shape} vs {labels.shape}")
    per_class: dict[str, float | None] = {}
    curves: dict[str, PRCurve] = {}
    for ci, name in enumerate(CLASSES):
        if labels[:, ci].sum() == 0:
            warnings.warn(
                f"class {name!r} has no positive sample in the evaluation set; "
                "its AP is undefined and excluded from mAP",
                stacklevel=2,
            )
            per_class[name] = None
            continue
        per_class[name] = average_precision(scores[:, ci], labels[:, ci], convention)
        curves[name] = pr_curve(scores[:, ci], labels[:, ci])
    defined = [v for v in per_class.values() if v is not None]
    if not defined:
        raise ConfigError("every class lacks positives; mAP undefined")
    report = APReport(
        per_class_ap=per_class,
        mean_ap=float(np.mean(defined)),
        n_eval=len(scores),
        config_hash=config_hash,
        convention=convention,
        dataset=dataset,
    )
    return report, curves


def score_manifest(
    model: Classifier,
    manifest: DatasetManifest,
    input_scale: int,
    crop_scale: int,
    batch_size: int = 64,
    store: ImageStore | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic per-class probabilities over a manifest (resize + center crop)."""
    if len(manifest) == 0:
        raise ConfigError("evaluation requires a non-empty manifest")
    store = store if store is not None else ImageStore(cache=False)
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(manifest), batch_size):
            chunk = manifest.entries[start : start + batch_size]
            images = np.stack(
                [eval_transform(store.get(entry), input_scale, crop_scale) for entry in chunk]
            )
            x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()
            scores.append(class_scores(model(x), model.head_config.mode).numpy())
    labels = np.stack([entry.labels for entry in manifest.entries])
    return np.concatenate(scores, axis=0), labels


def evaluate_model(
    model: Classifier,
    manifest: DatasetManifest,
    input_scale: int,
    crop_scale: int,
    convention: str = "continuous",
    config_hash: str | None = None,
    batch_size: int = 64,
) -> APReport:
    """In-memory evaluation of a live model; no files written."""
    scores, labels = score_manifest(model, manifest, input_scale, crop_scale, batch_size)
    report, _ = evaluate_scores(
        scores, labels, convention, config_hash, dataset=f"{manifest.name}/{manifest.split}"
    )
    return report


def evaluate(
    checkpoint: str | Path | Classifier,
    manifest: DatasetManifest,
    out_dir: str | Path | None = None,
    input_scale: int | None = None,
    crop_scale: int | None = None,
    convention: str = "continuous",
    config_hash: str | None = None,
    batch_size: int = 64,
) -> tuple[APReport, dict[str, PRCurve]]:
    """Evaluate a checkpoint (or live model) over a manifest.

    Geometry defaults to the train settings recorded in the checkpoint. When
    out_dir is given, writes ap_report.json plus one pr_<class>.csv per class
    that has positives.
    """
    if isinstance(checkpoint, Classifier):
        model = checkpoint
    else:
        model, meta = load_checkpoint(checkpoint)
        config_hash = config_hash if config_hash is not None else meta.get("config_hash")
        stored = meta.get("config") or {}
        train_section = stored.get("train", {}) if isinstance(stored, dict) else {}
        if input_scale is None:
            input_scale = train_section.get("input_scale")
        if crop_scale is None:
            crop_scale = train_section.get("crop_scale")
    if input_scale is None or crop_scale is None:
        raise ConfigError("input_scale and crop_scale required (not recorded in checkpoint)")
    scores, labels = score_manifest(model, manifest, input_scale, crop_scale, batch_size)
    report, curves = evaluate_scores(
        scores, labels, convention, config_hash, dataset=f"{manifest.name}/{manifest.split}"
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_ap_report(out_dir / "ap_report.json", report)
        write_pr_csvs(out_dir, curves)
    return report, curves


# ---------------------------------------------------------------------------
# curve files and plots


def write_pr_csvs(out_dir: str | Path, curves: dict[str, PRCurve]) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, curve in curves.items():
        path = out_dir / f"pr_{name}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["threshold", "precision", "recall"])
            for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
                writer.writerow([repr(float(t)), repr(float(p)), repr(float(r))])
        paths.append(path)
    return paths


def load_pr_csv(path: str | Path) -> PRCurve:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"curve file not found: {path}")
    thresholds, precision, recall = [], [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["threshold", "precision", "recall"]:
            raise ConfigError(f"{path}: expected header threshold,precision,recall")
        for row in reader:
            thresholds.append(float(row[0]))
            precision.append(float(row[1]))
            recall.append(float(row[2]))
    return PRCurve(np.asarray(thresholds), np.asarray(precision), np.asarray(recall))


def render_pr_curves(report_dir: str | Path, out_path: str | Path | None = None) -> Path:
    """Raster plot of every pr_<class>.csv in report_dir on shared axes."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report_dir = Path(report_dir)
    csv_paths = sorted(report_dir.glob("pr_*.csv"))
    if not csv_paths:
        raise ConfigError(f"no pr_<class>.csv files found in {report_dir}")
    fig, ax = plt.subplots(figsize=(6, 5))
    for path in csv_paths:
        curve = load_pr_csv(path)
        ax.plot(curve.recall, curve.precision, label=path.stem.removeprefix("pr_"))
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.set_title("P-R curves")
    out_path = Path(out_path) if out_path is not None else report_dir / "pr_curves.png"
    fig.savefig(out_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return out_path


# ---------------------------------------------------------------------------
# ablation grid


def describe_flags(train_config) -> str:
    """Human-readable recipe flags, echoed verbatim into the ablation table."""
    parts = []
    aug = train_config.augment
    if aug.flip_prob > 0:
        parts.append("flip")
    lo, hi = aug.rotate_range
    if lo != 0 or hi != 0:
        parts.append(f"rotate({lo:g},{hi:g})")
    if aug.synthesis == "mixup":
        parts.append(f"mixup({aug.mixup_alpha:g},{aug.mixup_beta:g})")
    elif aug.synthesis == "blend":
        parts.append(f"blend({aug.blend_lambda:g})")
    if train_config.attention.enabled:
        parts.append("cbam")
    if train_config.head.mode == "rescoring6":
        parts.append("rescoring")
    return "+".join(parts) if parts else "none"


def _run_ablation_row(row, manifests, out_dir: Path | None, index: int) -> dict:
    # Imported lazily: training imports this module at load time.
    from . import training
    from .config import ensure_dataset, load_row_manifests

    result = {
        "index": index,
        "input_scale": row.train.input_scale,
        "crop_scale": row.train.crop_scale,
        "flags": describe_flags(row.train),
        "config_hash": row.config_hash,
        "map": None,
        "map_voc11": None,
        "per_class_ap": None,
        "error": None,
    }
    try:
        if manifests is not None:
            train_manifest, eval_manifest = manifests
        else:
            ensure_dataset(row)
            train_manifest, eval_manifest = load_row_manifests(row)
        row_out = out_dir / f"row_{index:02d}" if out_dir is not None else None
        trained = training.train(
            row.train,
            train_manifest,
            eval_manifest,
            out_dir=row_out,
            config_hash=row.config_hash,
            raw_config=row.raw,
        )
        scores, labels = score_manifest(
            trained.model, eval_manifest, row.train.input_scale, row.train.crop_scale
        )
        report, _ = evaluate_scores(scores, labels, "continuous", row.config_hash)
        report_voc, _ = evaluate_scores(scores, labels, "voc11", row.config_hash)
        result["map"] = report.mean_ap
        result["map_voc11"] = report_voc.mean_ap
        result["per_class_ap"] = report.per_class_ap
    except Exception as exc:  # row isolation: a failed row must not sink the grid
        result["error"] = f"{type(exc).__name__}: {exc}"
    return result


def format_ablation_table(rows: list[dict]) -> str:
    lines = [f"{'input':>5}  {'crop':>5}  {'augmentation':<28}  {'mAP':>7}  {'mAP(11pt)':>9}"]
    for row in rows:
        if row["error"] is None:
            map_str = f"{row['map']:.4f}"
            voc_str = f"{row['map_voc11']:.4f}"
        else:
            map_str, voc_str = "FAILED", "-"
        lines.append(
            f"{row['input_scale']:>5}  {row['crop_scale']:>5}  {row['flags']:<28}  {map_str:>7}  {voc_str:>9}"
        )
    lines.append("")
    lines.append("AP convention: continuous (sum of precision at positive ranks);")
    lines.append("mAP(11pt) is the VOC 11-point interpolated variant of the same scores.")
    failures = [row for row in rows if row["error"]]
    for row in failures:
        lines.append(f"row {row['index']}: {row['error']}")
    return "\n".join(lines) + "\n"


def ablation_run(
    grid,
    manifests: tuple[DatasetManifest, DatasetManifest] | None = None,
    out_dir: str | Path | None = None,
    max_workers: int = 1,
) -> list[dict]:
    """Train and evaluate every grid row independently; failures are recorded
    per row and the remaining rows proceed.

    grid is a list of experiment configs (see the config module). manifests,
    when given, short-circuits dataset resolution with one shared
    (train, eval) pair. Rows run sequentially unless max_workers > 1.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("ablation grid is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if max_workers > 1 and manifests is None:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            futures = [
                pool.submit(_run_ablation_row, row, None, out_dir, i) for i, row in enumerate(grid)
            ]
            results = [f.result() for f in futures]
    else:
        results = [_run_ablation_row(row, manifests, out_dir, i) for i, row in enumerate(grid)]
    if out_dir is not None:
        with open(out_dir / "ablation_results.json", "w") as f:
            json.dump(results, f, indent=2)
            f.write("\n")
        (out_dir / "ablation_table.txt").write_text(format_ablation_table(results))
    return results
