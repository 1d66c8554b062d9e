"""Synthetic transparent-composite dataset generator.

Images are built in absorbance space: each translucent object contributes a
per-pixel, per-channel absorbance, contributions add where objects overlap,
and the stored image is the transmission exp(-A) mapped to 8-bit. More
overlap therefore always means darker pixels, matching how X-ray scans of
stacked translucent objects behave.

Each of the five classes is a distinct parametric silhouette family (L,
triangle, bar+ring, V, X) with randomized pose, size, aspect, and per-channel
attenuation, so class identity is carried by shape rather than color.
Non-class clutter (random ellipses) is layered into every image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .datasets import (
    CLASSES,
    NUM_CLASSES,
    ANNOTATIONS_FILENAME,
    IMAGES_DIRNAME,
    INDEX_FILENAME,
    BoundingBox,
    DatasetManifest,
    load_split_dir,
    write_annotations_csv,
    write_index_csv,
)
from .errors import ConfigError

# Mean aspect ratio (width / height) and uniform jitter per silhouette family.
_ASPECTS = {
    "gun": (1.35, 0.15),
    "knife": (2.8, 0.3),
    "wrench": (2.3, 0.25),
    "pliers": (1.5, 0.15),
    "scissors": (1.2, 0.1),
}


@dataclass
class SynthConfig:
    """Parameters for one synthesized split.

    positive_rate and object_scale_ranges accept either a single value
    applied to every class or a per-class-name mapping. Scales are the
    characteristic size sqrt(width * height) of the emitted bounding box.
    """

    n_images: int
    image_size: int = 128
    positive_rate: float | dict[str, float] = 0.2
    object_scale_ranges: tuple[float, float] | dict[str, tuple[float, float]] = (40.0, 60.0)
    max_objects_per_image: int = 3
    attenuation_range: tuple[float, float] = (0.5, 1.4)
    rng_seed: int = 0
    clutter_range: tuple[int, int] = (1, 4)
    clutter_attenuation_scale: float = 0.5

    def rates(self) -> dict[str, float]:
        if isinstance(self.positive_rate, dict):
            unknown = set(self.positive_rate) - set(CLASSES)
            if unknown:
                raise ConfigError(f"positive_rate names unknown classes: {sorted(unknown)}")
            return {name: float(self.positive_rate.get(name, 0.0)) for name in CLASSES}
        return {name: float(self.positive_rate) for name in CLASSES}

    def scale_ranges(self) -> dict[str, tuple[float, float]]:
        if isinstance(self.object_scale_ranges, dict):
            unknown = set(self.object_scale_ranges) - set(CLASSES)
            if unknown:
                raise ConfigError(f"object_scale_ranges names unknown classes: {sorted(unknown)}")
            default = (40.0, 60.0)
            return {
                name: tuple(float(v) for v in self.object_scale_ranges.get(name, default))
                for name in CLASSES
            }
        lo, hi = self.object_scale_ranges
        return {name: (float(lo), float(hi)) for name in CLASSES}

    def validate(self) -> None:
        if self.n_images < 0:
            raise ConfigError(f"n_images must be non-negative, got {self.n_images}")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be at least 8, got {self.image_size}")
        for name, rate in self.rates().items():
            # Rate 0 disables a class entirely (degenerate but useful), so the
            # accepted interval is [0, 1) rather than the open interval.
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"positive_rate for {name} must be in [0, 1), got {rate}")
        for name, (lo, hi) in self.scale_ranges().items():
            if lo <= 0 or hi <= 0:
                raise ConfigError(f"scale range for {name} must be positive, got ({lo}, {hi})")
            if lo > hi:
                raise ConfigError(f"infeasible scale range for {name}: min {lo} > max {hi}")
            if hi > self.image_size:
                raise ConfigError(f"scale range for {name} exceeds image_size {self.image_size}")
        if self.max_objects_per_image < 1:
            raise ConfigError(f"max_objects_per_image must be at least 1, got {self.max_objects_per_image}")
        lo, hi = self.attenuation_range
        if not 0 < lo <= hi:
            raise ConfigError(f"attenuation_range must satisfy 0 < min <= max, got ({lo}, {hi})")
        clo, chi = self.clutter_range
        if not 0 <= clo <= chi:
            raise ConfigError(f"clutter_range must satisfy 0 <= min <= max, got ({clo}, {chi})")
        if self.clutter_attenuation_scale < 0:
            raise ConfigError("clutter_attenuation_scale must be non-negative")


def intensity_from_absorbance(absorbance: np.ndarray) -> np.ndarray:
    """Transmission through accumulated absorbance: exp(-A), always in (0, 1]."""
    return np.exp(-np.asarray(absorbance, dtype=np.float32))


def _segment_distance(x, y, x0, y0, x1, y1):
    """Distance from grid points (x, y) to the segment (x0,y0)-(x1,y1)."""
    dx, dy = x1 - x0, y1 - y0
    denom = dx * dx + dy * dy
    if denom == 0:
        return np.hypot(x - x0, y - y0)
    t = np.clip(((x - x0) * dx + (y - y0) * dy) / denom, 0.0, 1.0)
    return np.hypot(x - (x0 + t * dx), y - (y0 + t * dy))


def _family_mask(class_index: int, x, y, w: float, h: float):
    """Silhouette membership for local coords (x right, y down), extent w x h."""
    hw, hh = w / 2.0, h / 2.0
    inside = (np.abs(x) <= hw) & (np.abs(y) <= hh)
    if class_index == 0:  # gun: top bar plus left grip (L silhouette)
        return inside & ((y <= -hh + 0.42 * h) | (x <= -hw + 0.36 * w))
    if class_index == 1:  # knife: long isoceles triangle, apex at +x
        half_width = hh * np.clip((hw - x) / w, 0.0, 1.0)
        return inside & (np.abs(y) <= half_width)
    if class_index == 2:  # wrench: shaft plus open ring head at +x
        ring_cx = hw - hh
        shaft = (np.abs(y) <= 0.16 * h) & (x <= ring_cx)
        r = np.hypot(x - ring_cx, y)
        ring = (r <= hh) & (r >= 0.55 * hh)
        jaw = (x - ring_cx > 0.55 * hh) & (np.abs(y) <= 0.28 * hh)
        return inside & (shaft | (ring & ~jaw))
    thickness = max(0.18 * h, 1.6)
    if class_index == 3:  # pliers: V of two thick segments hinged at -x
        d1 = _segment_distance(x, y, -hw, 0.0, hw, -hh + thickness / 2)
        d2 = _segment_distance(x, y, -hw, 0.0, hw, hh - thickness / 2)
        return inside & ((d1 <= thickness / 2) | (d2 <= thickness / 2))
    if class_index == 4:  # scissors: X of two crossed thick segments
        d1 = _segment_distance(x, y, -hw, -hh + thickness / 2, hw, hh - thickness / 2)
        d2 = _segment_distance(x, y, -hw, hh - thickness / 2, hw, -hh + thickness / 2)
        return inside & ((d1 <= thickness / 2) | (d2 <= thickness / 2))
    raise ConfigError(f"class_index {class_index} outside 0..{NUM_CLASSES - 1}")


def render_object_mask(class_index: int, width: float, height: float, theta: float) -> np.ndarray:
    """Rasterize one silhouette rotated by theta radians.

    Returns a float32 canvas large enough that no rotation clips the shape;
    values are 1.0 inside the silhouette and 0.0 outside.
    """
    if width <= 0 or height <= 0:
        raise ConfigError(f"object extent must be positive, got {width}x{height}")
    canvas = int(math.ceil(math.hypot(width, height))) + 4
    center = (canvas - 1) / 2.0
    ii, jj = np.mgrid[0:canvas, 0:canvas]
    u = jj - center  # +x right
    v = ii - center  # +y down
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    local_x = u * cos_t + v * sin_t
    local_y = -u * sin_t + v * cos_t
    mask = _family_mask(class_index, local_x, local_y, width, height)
    if not mask.any():
        # Degenerate at extreme thinness; fall back to the bounding rectangle
        # so every placed object stays visible and annotatable.
        mask = (np.abs(local_x) <= width / 2.0) & (np.abs(local_y) <= height / 2.0)
    return mask.astype(np.float32)


def _mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight bounding box (row0, col0, height, width) of the nonzero region."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    return r0, c0, r1 - r0 + 1, c1 - c0 + 1


def _render_at_scale(class_index: int, target_scale: float, aspect: float, theta: float, max_extent: int):
    """Render a silhouette whose bounding-box scale tracks target_scale.

    A first render measures the achieved sqrt(bh*bw); a second render corrects
    the extent by that ratio so emitted annotation scales match the configured
    range closely. The shape is shrunk if its box would not fit max_extent.
    """
    w = target_scale * math.sqrt(aspect)
    h = target_scale / math.sqrt(aspect)
    mask = render_object_mask(class_index, w, h, theta)
    _, _, bh, bw = _mask_bbox(mask)
    achieved = math.sqrt(bh * bw)
    k = target_scale / achieved
    if max(bh, bw) * k > max_extent:
        k = min(max_extent / bh, max_extent / bw)
    if abs(k - 1.0) > 1e-3:
        mask = render_object_mask(class_index, w * k, h * k, theta)
    r0, c0, bh, bw = _mask_bbox(mask)
    return mask[r0 : r0 + bh, c0 : c0 + bw]


def _ellipse_absorbance(image_size: int, rng: np.random.Generator) -> np.ndarray:
    """One clutter ellipse as a unit-absorbance mask over the full image grid."""
    a = rng.uniform(5.0, 0.22 * image_size)
    b = a * rng.uniform(0.45, 1.0)
    theta = rng.uniform(0.0, math.pi)
    cx = rng.uniform(0, image_size - 1)
    cy = rng.uniform(0, image_size - 1)
    ii, jj = np.mgrid[0:image_size, 0:image_size]
    u = jj - cx
    v = ii - cy
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    x = u * cos_t + v * sin_t
    y = -u * sin_t + v * cos_t
    return (((x / a) ** 2 + (y / b) ** 2) <= 1.0).astype(np.float32)


def _assign_labels(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Exact-count positive assignment: each class marks round(rate * n) images.

    A random subset of exactly that size keeps empirical rates at the config
    value up to rounding, independent of n, while which images are positive
    stays uniformly random and classes stay independent.
    """
    n = config.n_images
    labels = np.zeros((n, NUM_CLASSES), dtype=np.uint8)
    rates = config.rates()
    for ci, name in enumerate(CLASSES):
        count = int(round(rates[name] * n))
        if count > 0:
            chosen = rng.permutation(n)[:count]
            labels[chosen, ci] = 1
    return labels


def synth_dataset(config: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Generate one split on disk and return its loaded manifest.

    Emits index.csv, annotations.csv (one row per placed object), and
    images/<id>.png under out_dir. Fully deterministic for a fixed rng_seed.
    """
    config.validate()
    out_dir = Path(out_dir)
    images_dir = out_dir / IMAGES_DIRNAME
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {images_dir}: {exc}") from exc

    rng = np.random.default_rng(config.rng_seed)
    labels = _assign_labels(config, rng)
    ranges = config.scale_ranges()
    att_lo, att_hi = config.attenuation_range
    clut_lo, clut_hi = config.clutter_range
    size = config.image_size
    max_extent = size - 2

    index_rows: list[tuple[str, np.ndarray]] = []
    annotation_rows: list[tuple[str, BoundingBox]] = []

    for i in range(config.n_images):
        sample_id = f"synth_{i:06d}"
        absorbance = np.zeros((size, size, 3), dtype=np.float32)

        present = [ci for ci in range(NUM_CLASSES) if labels[i, ci]]
        placements = list(present)
        budget = config.max_objects_per_image - len(present)
        if budget > 0 and present:
            extra = int(rng.integers(0, budget + 1))
            for _ in range(extra):
                placements.append(present[int(rng.integers(len(present)))])

        for ci in placements:
            lo, hi = ranges[CLASSES[ci]]
            target = rng.uniform(lo, hi)
            mean_aspect, jitter = _ASPECTS[CLASSES[ci]]
            aspect = rng.uniform(mean_aspect - jitter, mean_aspect + jitter)
            theta = rng.uniform(0.0, 2.0 * math.pi)
            mask = _render_at_scale(ci, target, aspect, theta, max_extent)
            bh, bw = mask.shape
            py = int(rng.integers(0, size - bh + 1))
            px = int(rng.integers(0, size - bw + 1))
            attenuation = rng.uniform(att_lo, att_hi, size=3).astype(np.float32)
            absorbance[py : py + bh, px : px + bw, :] += mask[:, :, None] * attenuation
            annotation_rows.append(
                (sample_id, BoundingBox(ci, float(px), float(py), float(bw), float(bh)))
            )

        n_clutter = int(rng.integers(clut_lo, clut_hi + 1))
        for _ in range(n_clutter):
            clutter = _ellipse_absorbance(size, rng)
            attenuation = rng.uniform(att_lo, att_hi, size=3).astype(np.float32)
            attenuation *= config.clutter_attenuation_scale
            absorbance += clutter[:, :, None] * attenuation

        intensity = intensity_from_absorbance(absorbance)
        pixels = np.clip(np.round(intensity * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(images_dir / f"{sample_id}.png")
        index_rows.append((sample_id, labels[i]))

    try:
        write_index_csv(out_dir / INDEX_FILENAME, index_rows)
        write_annotations_csv(out_dir / ANNOTATIONS_FILENAME, annotation_rows)
    except OSError as exc:
        raise ConfigError(f"cannot write manifest files under {out_dir}: {exc}") from exc

    return load_split_dir(out_dir)
