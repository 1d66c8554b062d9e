"""Seed-deterministic image augmentations.

Four families: axis flips, bounded rotation with canvas expansion, bilinear
resize plus random crop, and batch-level synthesis (mixup of images with
deferred label mixing, or blending with OR-merged labels).

All transforms are pure functions of (input, rng draws), operate on float
HxWxC arrays in [0, 1], and never alter labels themselves; mixup hands both
label sets plus the mixing coefficient to the loss instead.

Resampling is bilinear throughout. Rotation pads with zeros outside the
source (blank margin); resize clamps to the edge and uses half-pixel centers,
so resizing to the same size is pixel-identical and rotation by 0 degrees is
an exact identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SYNTHESIS_MODES = ("none", "mixup", "blend")


@dataclass
class AugmentPipelineConfig:
    """Pipeline order: resize -> random crop -> flip -> rotate -> synthesis.

    flip_prob applies independently per axis. rotate_range is in degrees;
    (0, 0) disables rotation exactly. Synthesis settings beyond the selected
    mode are ignored.
    """

    flip_prob: float = 0.5
    rotate_range: tuple[float, float] = (-15.0, 15.0)
    resize_to: int = 256
    crop_to: int = 224
    synthesis: str = "none"
    mixup_alpha: float = 0.4
    mixup_beta: float = 0.4
    blend_lambda: float = 0.5

    def validate(self) -> None:
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        lo, hi = self.rotate_range
        if lo > hi:
            raise ConfigError(f"rotate_range min {lo} > max {hi}")
        if self.resize_to < 1:
            raise ConfigError(f"resize_to must be at least 1, got {self.resize_to}")
        if not 1 <= self.crop_to <= self.resize_to:
            raise ConfigError(f"crop_to must satisfy 1 <= crop_to <= resize_to, got {self.crop_to}")
        if self.synthesis not in SYNTHESIS_MODES:
            raise ConfigError(f"synthesis must be one of {SYNTHESIS_MODES}, got {self.synthesis!r}")
        if self.synthesis == "mixup" and (self.mixup_alpha <= 0 or self.mixup_beta <= 0):
            raise ConfigError(f"mixup parameters must be positive, got ({self.mixup_alpha}, {self.mixup_beta})")
        if self.synthesis == "blend" and not 0.0 <= self.blend_lambda <= 1.0:
            raise ConfigError(f"blend_lambda must be in [0, 1], got {self.blend_lambda}")


# ---------------------------------------------------------------------------
# flips


def flip_image(image: np.ndarray, horizontal: bool = False, vertical: bool = False) -> np.ndarray:
    """Mirror along the requested axes; (x, y) maps to (W-1-x, y) horizontally."""
    out = image
    if horizontal:
        out = out[:, ::-1]
    if vertical:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def random_flip(image: np.ndarray, rng: np.random.Generator, flip_prob: float = 0.5) -> np.ndarray:
    """Independently mirror each axis with probability flip_prob (horizontal drawn first)."""
    horizontal = rng.uniform() < flip_prob
    vertical = rng.uniform() < flip_prob
    return flip_image(image, horizontal=horizontal, vertical=vertical)


# ---------------------------------------------------------------------------
# bilinear resampling


def _bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray, pad: str) -> np.ndarray:
    """Sample an (H, W, C) image at float coordinates.

    pad='edge' clamps out-of-range samples to the border pixel; pad='zero'
    treats everything outside the source as 0. Integer coordinates reproduce
    the source pixel exactly.
    """
    h, w = image.shape[:2]
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    fx = (xs - x0f)[..., None]
    fy = (ys - y0f)[..., None]
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    def corner(yi, xi):
        value = image[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        if pad == "zero":
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            value = value * valid[..., None]
        return value

    top = (1.0 - fx) * corner(y0, x0) + fx * corner(y0, x1)
    bottom = (1.0 - fx) * corner(y1, x0) + fx * corner(y1, x1)
    out = (1.0 - fy) * top + fy * bottom
    # Convex weights keep values inside the source range mathematically, but
    # per-term rounding can overshoot by a few ulps; pin the contract.
    lo = min(0.0, float(image.min()))
    hi = max(1.0, float(image.max()))
    return np.clip(out, lo, hi).astype(image.dtype)


def _resize_hw(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers: src = (dst + 0.5) * scale - 0.5."""
    h, w = image.shape[:2]
    if (out_h, out_w) == (h, w):
        return image.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)
    return _bilinear_sample(image, grid_x, grid_y, pad="edge")


def resize(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample to size x size; values stay in [0, 1]."""
    if size < 1:
        raise ConfigError(f"resize target must be at least 1, got {size}")
    return _resize_hw(image, size, size)


# ---------------------------------------------------------------------------
# rotation


def _snap(value: float) -> float:
    """Zero out float noise in cos/sin at right angles so they stay exact."""
    if abs(value) < 1e-12:
        return 0.0
    if abs(abs(value) - 1.0) < 1e-12:
        return math.copysign(1.0, value)
    return value


def rotate_keep_all(image: np.ndarray, theta_degrees: float) -> np.ndarray:
    """Rotate about the center onto a canvas expanded to hold every source pixel.

    Positive angles turn the content clockwise on screen (y grows downward).
    Out-of-source samples are zero-padded.
    """
    h, w = image.shape[:2]
    theta = math.radians(theta_degrees)
    cos_t = _snap(math.cos(theta))
    sin_t = _snap(math.sin(theta))
    out_w = int(math.ceil(abs(w * cos_t) + abs(h * sin_t)))
    out_h = int(math.ceil(abs(w * sin_t) + abs(h * cos_t)))
    jj, ii = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    qx = jj - (out_w - 1) / 2.0
    qy = ii - (out_h - 1) / 2.0
    src_x = cos_t * qx + sin_t * qy + (w - 1) / 2.0
    src_y = -sin_t * qx + cos_t * qy + (h - 1) / 2.0
    return _bilinear_sample(image, src_x, src_y, pad="zero")


def rotate_image(image: np.ndarray, theta_degrees: float) -> np.ndarray:
    """Rotate with full-canvas expansion, then resize back to the input size."""
    h, w = image.shape[:2]
    return _resize_hw(rotate_keep_all(image, theta_degrees), h, w)


def random_rotate(
    image: np.ndarray,
    rng: np.random.Generator,
    rotate_range: tuple[float, float] = (-15.0, 15.0),
) -> np.ndarray:
    """Rotate by theta ~ Uniform(rotate_range) degrees; (0, 0) is an exact identity."""
    lo, hi = rotate_range
    if lo > hi:
        raise ConfigError(f"rotate_range min {lo} > max {hi}")
    theta = rng.uniform(lo, hi) if hi > lo else float(lo)
    if theta == 0.0:
        return image.copy()
    return rotate_image(image, theta)


# ---------------------------------------------------------------------------
# crops


def crop_at(image: np.ndarray, top: int, left: int, crop: int) -> np.ndarray:
    h, w = image.shape[:2]
    if crop < 1:
        raise ConfigError(f"crop must be at least 1, got {crop}")
    if top < 0 or left < 0 or top + crop > h or left + crop > w:
        raise ConfigError(f"crop window {crop}x{crop} at ({top}, {left}) exceeds image {h}x{w}")
    return image[top : top + crop, left : left + crop].copy()


def random_crop(image: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    """Contiguous crop x crop window at offsets uniform over the valid range (top drawn first)."""
    h, w = image.shape[:2]
    if crop > h or crop > w:
        raise ConfigError(f"crop {crop} larger than image {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return crop_at(image, top, left, crop)


def center_crop(image: np.ndarray, crop: int) -> np.ndarray:
    h, w = image.shape[:2]
    if crop > h or crop > w:
        raise ConfigError(f"crop {crop} larger than image {h}x{w}")
    return crop_at(image, (h - crop) // 2, (w - crop) // 2, crop)


def eval_transform(image: np.ndarray, resize_to: int, crop_to: int) -> np.ndarray:
    """Deterministic evaluation-time geometry: resize, then center crop."""
    if crop_to > resize_to:
        raise ConfigError(f"crop_to {crop_to} exceeds resize_to {resize_to}")
    return center_crop(resize(image, resize_to), crop_to)


# ---------------------------------------------------------------------------
# batch synthesis


@dataclass
class MixedBatch:
    """Mixup output: images are mixed, labels are kept separate for loss mixing."""

    images: np.ndarray
    labels_original: np.ndarray
    labels_shuffled: np.ndarray
    lam: float
    permutation: np.ndarray

    def __post_init__(self):
        if sorted(self.permutation.tolist()) != list(range(len(self.permutation))):
            raise ConfigError("permutation must be a bijection on batch indices")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")


def mixup_batch(
    images: np.ndarray,
    labels: np.ndarray,
    alpha: float,
    beta: float,
    rng: np.random.Generator,
) -> MixedBatch:
    """Mix a batch with itself under one shared lambda ~ Beta(alpha, beta).

    Returns lam * X + (1 - lam) * X[perm] together with both label sets; the
    training loss combines them as lam * L_original + (1 - lam) * L_shuffled.
    """
    if len(images) < 1:
        raise ConfigError("mixup requires a non-empty batch")
    if alpha <= 0 or beta <= 0:
        raise ConfigError(f"mixup parameters must be positive, got ({alpha}, {beta})")
    lam = float(rng.beta(alpha, beta))
    permutation = rng.permutation(len(images))
    mixed = lam * images + (1.0 - lam) * images[permutation]
    return MixedBatch(
        images=mixed.astype(images.dtype),
        labels_original=labels,
        labels_shuffled=labels[permutation],
        lam=lam,
        permutation=permutation,
    )


def blend_pair(img1: np.ndarray, img2: np.ndarray, lam: float) -> np.ndarray:
    """lam * img1 + (1 - lam) * img2; every output pixel lies between the inputs."""
    if img1.shape != img2.shape:
        raise ConfigError(f"blend requires equal shapes, got {img1.shape} vs {img2.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"blend coefficient must be in [0, 1], got {lam}")
    return (lam * img1 + (1.0 - lam) * img2).astype(img1.dtype)


def blend_labels(l1: np.ndarray, l2: np.ndarray) -> np.ndarray:
    """Elementwise OR: the blend carries every object of both sources."""
    if l1.shape != l2.shape:
        raise ConfigError(f"label shapes differ: {l1.shape} vs {l2.shape}")
    return np.logical_or(l1, l2).astype(np.uint8)


def blend_batch(
    images: np.ndarray,
    labels: np.ndarray,
    lam: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Blend each image with an in-batch shuffle partner; labels are OR-merged."""
    if len(images) < 1:
        raise ConfigError("blend requires a non-empty batch")
    permutation = rng.permutation(len(images))
    blended = blend_pair(images, images[permutation], lam)
    merged = blend_labels(labels, labels[permutation])
    return blended, merged, permutation


@dataclass
class AugmentedBatch:
    """Result of the full pipeline over one batch.

    For mixup, labels holds the original labels and labels_shuffled and lam
    drive loss mixing; for blend and none, labels is final and the extras
    are None.
    """

    images: np.ndarray
    labels: np.ndarray
    labels_shuffled: np.ndarray | None = None
    lam: float | None = None
    permutation: np.ndarray | None = None


def augment_batch(
    images,
    labels: np.ndarray,
    config: AugmentPipelineConfig,
    rng: np.random.Generator,
) -> AugmentedBatch:
    """Run resize -> random crop -> flip -> rotate per image, then batch synthesis.

    images is an (N, H, W, C) array or a sequence of HxWxC arrays (sizes may
    differ; the resize step unifies them). Per-image draws happen in batch
    order so the whole pipeline is reproducible from the rng state.
    """
    config.validate()
    if len(images) != len(labels):
        raise ConfigError(f"batch size mismatch: {len(images)} images, {len(labels)} label rows")
    if len(images) == 0:
        raise ConfigError("augment_batch requires a non-empty batch")
    channels = images[0].shape[-1]
    out = np.empty((len(images), config.crop_to, config.crop_to, channels), dtype=images[0].dtype)
    for i, image in enumerate(images):
        x = resize(image, config.resize_to)
        x = random_crop(x, config.crop_to, rng)
        x = random_flip(x, rng, config.flip_prob)
        x = random_rotate(x, rng, config.rotate_range)
        out[i] = x
    if config.synthesis == "mixup":
        mixed = mixup_batch(out, labels, config.mixup_alpha, config.mixup_beta, rng)
        return AugmentedBatch(
            images=mixed.images,
            labels=mixed.labels_original,
            labels_shuffled=mixed.labels_shuffled,
            lam=mixed.lam,
            permutation=mixed.permutation,
        )
    if config.synthesis == "blend":
        blended, merged, permutation = blend_batch(out, labels, config.blend_lambda, rng)
        return AugmentedBatch(images=blended, labels=merged, permutation=permutation)
    return AugmentedBatch(images=out, labels=labels)
