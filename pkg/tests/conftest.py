"""Shared fixtures: tiny on-disk datasets and builder helpers."""

from pathlib import Path

import numpy as np
import pytest

from xrayrec.augment import AugmentPipelineConfig
from xrayrec.datasets import load_split_dir
from xrayrec.model import AttentionConfig, BackboneConfig, HeadConfig
from xrayrec.synth import SynthConfig, synth_dataset
from xrayrec.training import TrainConfig

REPO_ROOT = Path(__file__).resolve().parents[1]


def small_synth_config(**overrides) -> SynthConfig:
    """Fast generator settings shared by the unit tests."""
    base = dict(
        n_images=24,
        image_size=48,
        positive_rate=0.4,
        object_scale_ranges=(14, 22),
        max_objects_per_image=2,
        attenuation_range=(0.6, 1.2),
        rng_seed=7,
        clutter_range=(0, 1),
        clutter_attenuation_scale=0.4,
    )
    base.update(overrides)
    return SynthConfig(**base)


def tiny_train_config(**overrides) -> TrainConfig:
    """Minimal training run: tiny backbone, tiny crops, one epoch."""
    base = dict(
        learning_rate=0.05,
        momentum=0.9,
        batch_size=8,
        epochs=1,
        input_scale=48,
        crop_scale=40,
        augment=AugmentPipelineConfig(flip_prob=0.5, rotate_range=(0.0, 0.0), synthesis="none"),
        backbone=BackboneConfig(family="tiny_cnn"),
        attention=AttentionConfig(enabled=False),
        head=HeadConfig(mode="plain5"),
        rng_seed=3,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def synth_split(tmp_path_factory):
    """One generated split reused by read-only tests."""
    out = tmp_path_factory.mktemp("synth") / "train"
    manifest = synth_dataset(small_synth_config(), out)
    return manifest


@pytest.fixture(scope="session")
def train_eval_manifests(tmp_path_factory):
    """A train/test pair small enough for one-epoch smoke runs."""
    root = tmp_path_factory.mktemp("pair")
    train = synth_dataset(small_synth_config(n_images=32, rng_seed=11), root / "train")
    test = synth_dataset(small_synth_config(n_images=16, rng_seed=12), root / "test")
    return train, test


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def reload_split(manifest):
    """Re-parse a manifest's directory from disk."""
    return load_split_dir(manifest.root, manifest.name, manifest.split)
