"""Declarative JSON experiment configs, grids, and config hashing.

An experiment file mirrors the module configs section by section::

    {
      "dataset": "path/to/dataset/root",
      "train_split": "train",
      "eval_split": "test",
      "out_dir": "runs/final",
      "synth": {"train": {...}, "test": {...}},          // optional generator spec
      "train": {
        "learning_rate": 0.01, "momentum": 0.9, "batch_size": 128, "epochs": 60,
        "input_scale": 512, "crop_scale": 448, "rng_seed": 0,
        "backbone": {"family": "resnet34"},
        "attention": {"enabled": true, "reduction_ratio": 16, "spatial_kernel": 7},
        "head": {"mode": "plain5"},
        "augment": {"flip_prob": 0.5, "rotate_range": [0, 0],
                     "synthesis": "mixup", "mixup_alpha": 0.4, "mixup_beta": 0.4}
      }
    }

A grid file holds a base experiment plus row overrides, each deep-merged onto
the base; unseeded rows get base seed + row index so every row trains with a
fresh, reproducible stream::

    {"base": {...}, "rows": [{"train": {"input_scale": 224, "crop_scale": 224}}, ...]}

The config hash is the first 12 hex digits of the SHA-256 of the canonical
JSON serialization (sorted keys, no whitespace); every artifact records it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentPipelineConfig
from .datasets import INDEX_FILENAME, DatasetManifest, load_manifest
from .errors import ConfigError
from .model import AttentionConfig, BackboneConfig, HeadConfig
from .synth import SynthConfig, synth_dataset
from .training import TrainConfig


def canonical_json(raw: dict) -> str:
    return json.dumps(raw, sort_keys=True, separators=(",", ":"))


def config_hash(raw: dict) -> str:
    return hashlib.sha256(canonical_json(raw).encode()).hexdigest()[:12]


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; non-dict values (including lists) are replaced."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _check_keys(raw: dict, allowed: set[str], context: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} config keys: {sorted(unknown)} (allowed: {sorted(allowed)})")


def _pair(value, context: str) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{context} must be a [min, max] pair, got {value!r}")
    return tuple(value)


_AUGMENT_KEYS = {
    "flip_prob", "rotate_range", "resize_to", "crop_to",
    "synthesis", "mixup_alpha", "mixup_beta", "blend_lambda",
}
_TRAIN_KEYS = {
    "learning_rate", "momentum", "batch_size", "epochs", "input_scale", "crop_scale",
    "rng_seed", "weight_decay", "eval_every",
}
_EXPERIMENT_KEYS = {"dataset", "train_split", "eval_split", "out_dir", "synth", "train"}
_SYNTH_KEYS = {
    "n_images", "image_size", "positive_rate", "object_scale_ranges", "max_objects_per_image",
    "attenuation_range", "rng_seed", "clutter_range", "clutter_attenuation_scale",
}


def augment_config_from_dict(raw: dict) -> AugmentPipelineConfig:
    raw = dict(raw)
    _check_keys(raw, _AUGMENT_KEYS, "augment")
    if "rotate_range" in raw:
        raw["rotate_range"] = _pair(raw["rotate_range"], "rotate_range")
    config = AugmentPipelineConfig(**raw)
    config.validate()
    return config


def train_config_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    augment = augment_config_from_dict(raw.pop("augment", {}))
    backbone_raw = dict(raw.pop("backbone", {}))
    _check_keys(backbone_raw, {"family", "pretrained_weights"}, "backbone")
    attention_raw = dict(raw.pop("attention", {}))
    _check_keys(attention_raw, {"enabled", "reduction_ratio", "spatial_kernel"}, "attention")
    head_raw = dict(raw.pop("head", {}))
    _check_keys(head_raw, {"mode", "conditional_mode"}, "head")
    _check_keys(raw, _TRAIN_KEYS, "train")
    config = TrainConfig(
        augment=augment,
        backbone=BackboneConfig(**backbone_raw),
        attention=AttentionConfig(**attention_raw),
        head=HeadConfig(**head_raw),
        **raw,
    )
    config.validate()
    return config


def synth_config_from_dict(raw: dict) -> SynthConfig:
    raw = dict(raw)
    _check_keys(raw, _SYNTH_KEYS, "synth")
    if "object_scale_ranges" in raw:
        ranges = raw["object_scale_ranges"]
        if isinstance(ranges, dict):
            raw["object_scale_ranges"] = {k: _pair(v, f"scale range for {k}") for k, v in ranges.items()}
        else:
            raw["object_scale_ranges"] = _pair(ranges, "object_scale_ranges")
    for key in ("attenuation_range", "clutter_range"):
        if key in raw:
            raw[key] = _pair(raw[key], key)
    config = SynthConfig(**raw)
    config.validate()
    return config


def load_synth_config(path: str | Path) -> dict[str, SynthConfig]:
    """A synth file is either one SynthConfig or {"<split>": SynthConfig, ...}."""
    raw = _load_json(path)
    if any(key in _SYNTH_KEYS for key in raw):
        return {"train": synth_config_from_dict(raw)}
    configs = {}
    for split, section in raw.items():
        if not isinstance(section, dict):
            raise ConfigError(f"synth section {split!r} must be an object")
        configs[split] = synth_config_from_dict(section)
    if not configs:
        raise ConfigError(f"synth config {path} defines no splits")
    return configs


@dataclass
class ExperimentConfig:
    dataset: str
    train: TrainConfig
    train_split: str = "train"
    eval_split: str | None = "test"
    out_dir: str | None = None
    synth: dict[str, SynthConfig] | None = None
    config_hash: str = ""
    raw: dict = field(default_factory=dict, repr=False)


def experiment_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    _check_keys(raw, _EXPERIMENT_KEYS, "experiment")
    if "dataset" not in raw:
        raise ConfigError("experiment config requires a 'dataset' path")
    synth = None
    if raw.get("synth") is not None:
        synth = {
            split: synth_config_from_dict(section) for split, section in raw["synth"].items()
        }
    return ExperimentConfig(
        dataset=raw["dataset"],
        train=train_config_from_dict(raw.get("train", {})),
        train_split=raw.get("train_split", "train"),
        eval_split=raw.get("eval_split", "test"),
        out_dir=raw.get("out_dir"),
        synth=synth,
        config_hash=config_hash(raw),
        raw=raw,
    )


def _load_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    return experiment_from_dict(_load_json(path))


def load_grid(path: str | Path) -> list[ExperimentConfig]:
    """Expand {"base": experiment, "rows": [override, ...]} into row configs."""
    raw = _load_json(path)
    if "base" not in raw or "rows" not in raw:
        raise ConfigError(f"grid config {path} must contain 'base' and 'rows'")
    if not isinstance(raw["rows"], list) or not raw["rows"]:
        raise ConfigError("grid 'rows' must be a non-empty list")
    base = raw["base"]
    base_seed = base.get("train", {}).get("rng_seed", 0)
    rows = []
    for i, override in enumerate(raw["rows"]):
        if not isinstance(override, dict):
            raise ConfigError(f"grid row {i} must be an object")
        merged = deep_merge(base, override)
        if "rng_seed" not in override.get("train", {}):
            merged.setdefault("train", {})
            merged["train"] = {**merged["train"], "rng_seed": base_seed + i}
        rows.append(experiment_from_dict(merged))
    return rows


def ensure_dataset(experiment: ExperimentConfig) -> Path:
    """Materialize synth-described splits that are not on disk yet."""
    root = Path(experiment.dataset)
    if experiment.synth:
        for split, synth_config in experiment.synth.items():
            split_dir = root / split
            if not (split_dir / INDEX_FILENAME).is_file():
                synth_dataset(synth_config, split_dir)
    return root


def load_row_manifests(experiment: ExperimentConfig) -> tuple[DatasetManifest, DatasetManifest | None]:
    root = Path(experiment.dataset)
    train_manifest = load_manifest(root, experiment.train_split)
    eval_manifest = load_manifest(root, experiment.eval_split) if experiment.eval_split else None
    return train_manifest, eval_manifest
