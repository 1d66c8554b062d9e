"""Dataset manifests, image loading, and descriptive statistics.

Canonical on-disk layout for one split::

    <root>/<split>/index.csv          header: id,gun,knife,wrench,pliers,scissors
    <root>/<split>/annotations.csv    header: id,class,x,y,w,h   (optional)
    <root>/<split>/images/<id>.png

Label cells are 0/1; an all-zero row is a negative image. Annotation rows
use the lowercase class name and pixel coordinates with a top-left origin.
Images are 8-bit lossless rasters, normalized to [0, 1] floats on load.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError

CLASSES = ("gun", "knife", "wrench", "pliers", "scissors")
NUM_CLASSES = len(CLASSES)
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}

INDEX_FILENAME = "index.csv"
ANNOTATIONS_FILENAME = "annotations.csv"
IMAGES_DIRNAME = "images"
SPLITS = ("train", "test")


def label_vector(*names: str) -> np.ndarray:
    """Build a 5-element 0/1 label vector from class names (empty = negative)."""
    labels = np.zeros(NUM_CLASSES, dtype=np.uint8)
    for name in names:
        labels[CLASS_INDEX[name]] = 1
    return labels


def is_negative(labels: np.ndarray) -> bool:
    return not bool(np.any(labels))


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, top-left origin."""

    class_index: int
    x: float
    y: float
    width: float
    height: float

    def __post_init__(self):
        if not 0 <= self.class_index < NUM_CLASSES:
            raise ConfigError(f"class_index {self.class_index} outside 0..{NUM_CLASSES - 1}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"box must have positive extent, got {self.width}x{self.height}")
        if self.x < 0 or self.y < 0:
            raise ConfigError(f"box origin must be non-negative, got ({self.x}, {self.y})")

    @property
    def class_name(self) -> str:
        return CLASSES[self.class_index]


def object_scale(box: BoundingBox) -> float:
    """Characteristic object size: sqrt(width * height), in pixels."""
    return math.sqrt(box.width * box.height)


@dataclass
class ManifestEntry:
    id: str
    image_path: Path
    labels: np.ndarray  # (5,) uint8
    boxes: tuple[BoundingBox, ...] = ()


@dataclass
class Sample:
    """A decoded image with its labels. Pixels are float32 in [0, 1], HxWx3."""

    id: str
    image: np.ndarray
    labels: np.ndarray


@dataclass
class DatasetManifest:
    name: str
    split: str
    entries: list[ManifestEntry]
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def has_boxes(self) -> bool:
        return any(entry.boxes for entry in self.entries)


def _parse_label_cell(value: str, line_no: int, path: Path) -> int:
    value = value.strip()
    if value not in ("0", "1"):
        raise ConfigError(f"{path}:{line_no}: label cell must be 0 or 1, got {value!r}")
    return int(value)


def load_manifest(root_path: str | Path, split: str) -> DatasetManifest:
    """Load one split of a dataset in the canonical layout.

    Raises ConfigError for a missing index file, an unresolvable image
    path (naming the offending id), or a malformed row (with line number).
    """
    root_path = Path(root_path)
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    split_dir = root_path / split
    return load_split_dir(split_dir, name=root_path.name, split=split)


def load_split_dir(split_dir: str | Path, name: str | None = None, split: str | None = None) -> DatasetManifest:
    """Load a single split directory (index.csv + images/, optional annotations.csv)."""
    split_dir = Path(split_dir)
    index_path = split_dir / INDEX_FILENAME
    if not index_path.is_file():
        raise ConfigError(f"missing index file: {index_path}")
    images_dir = split_dir / IMAGES_DIRNAME

    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with open(index_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        expected = ["id", *CLASSES]
        if header is None or [h.strip() for h in header] != expected:
            raise ConfigError(f"{index_path}:1: expected header {','.join(expected)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 1 + NUM_CLASSES:
                raise ConfigError(f"{index_path}:{line_no}: expected {1 + NUM_CLASSES} cells, got {len(row)}")
            sample_id = row[0].strip()
            if not sample_id:
                raise ConfigError(f"{index_path}:{line_no}: empty id")
            if sample_id in seen:
                raise ConfigError(f"{index_path}:{line_no}: duplicate id {sample_id!r} (first at line {seen[sample_id]})")
            seen[sample_id] = line_no
            labels = np.array(
                [_parse_label_cell(cell, line_no, index_path) for cell in row[1:]],
                dtype=np.uint8,
            )
            image_path = images_dir / f"{sample_id}.png"
            if not image_path.is_file():
                raise ConfigError(f"image file not found for id {sample_id!r}: {image_path}")
            entries.append(ManifestEntry(id=sample_id, image_path=image_path, labels=labels))

    annotations_path = split_dir / ANNOTATIONS_FILENAME
    if annotations_path.is_file():
        _attach_annotations(annotations_path, entries)

    return DatasetManifest(
        name=name if name is not None else split_dir.parent.name,
        split=split if split is not None else split_dir.name,
        entries=entries,
        root=split_dir,
    )


def _attach_annotations(path: Path, entries: list[ManifestEntry]) -> None:
    by_id = {entry.id: entry for entry in entries}
    boxes: dict[str, list[BoundingBox]] = {entry.id: [] for entry in entries}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        expected = ["id", "class", "x", "y", "w", "h"]
        if header is None or [h.strip() for h in header] != expected:
            raise ConfigError(f"{path}:1: expected header {','.join(expected)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 6:
                raise ConfigError(f"{path}:{line_no}: expected 6 cells, got {len(row)}")
            sample_id = row[0].strip()
            if sample_id not in by_id:
                raise ConfigError(f"{path}:{line_no}: annotation references unknown id {sample_id!r}")
            class_name = row[1].strip().lower()
            if class_name not in CLASS_INDEX:
                raise ConfigError(f"{path}:{line_no}: unknown class {class_name!r}")
            try:
                x, y, w, h = (float(cell) for cell in row[2:6])
            except ValueError as exc:
                raise ConfigError(f"{path}:{line_no}: malformed box coordinates: {exc}") from exc
            try:
                box = BoundingBox(CLASS_INDEX[class_name], x, y, w, h)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{line_no}: {exc}") from exc
            boxes[sample_id].append(box)
    for entry in entries:
        entry.boxes = tuple(boxes[entry.id])


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file to float32 HxWx3 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_sample(entry: ManifestEntry) -> Sample:
    return Sample(id=entry.id, image=load_image(entry.image_path), labels=entry.labels.copy())


class ImageStore:
    """Image loader with an optional in-memory cache (uint8 to halve footprint).

    Desk-scale sets fit comfortably in memory; pass cache=False to re-read
    from disk on every access for larger corpora.
    """

    def __init__(self, cache: bool = True):
        self.cache = cache
        self._store: dict[str, np.ndarray] = {}

    def get(self, entry: ManifestEntry) -> np.ndarray:
        if self.cache and entry.id in self._store:
            raw = self._store[entry.id]
        else:
            with Image.open(entry.image_path) as img:
                raw = np.asarray(img.convert("RGB"), dtype=np.uint8)
            if self.cache:
                self._store[entry.id] = raw
        return raw.astype(np.float32) / 255.0


@dataclass
class LabelDistribution:
    """Per-class image counts/percentages plus the negative-image share."""

    total: int
    counts: dict[str, int]
    percentages: dict[str, float]
    negative_count: int
    negative_percentage: float

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "classes": {
                name: {"count": self.counts[name], "percentage": self.percentages[name]}
                for name in CLASSES
            },
            "negative": {"count": self.negative_count, "percentage": self.negative_percentage},
        }


def label_distribution(manifest: DatasetManifest) -> LabelDistribution:
    """Count images carrying each class (an image may carry several classes).

    Percentages are per image: count / total * 100.
    """
    if len(manifest) == 0:
        raise ConfigError("label_distribution requires a non-empty manifest")
    labels = np.stack([entry.labels for entry in manifest.entries])
    total = len(manifest)
    counts = labels.sum(axis=0)
    negative = int(np.sum(~labels.any(axis=1)))
    return LabelDistribution(
        total=total,
        counts={name: int(counts[i]) for i, name in enumerate(CLASSES)},
        percentages={name: 100.0 * counts[i] / total for i, name in enumerate(CLASSES)},
        negative_count=negative,
        negative_percentage=100.0 * negative / total,
    )


@dataclass
class ScaleHistogram:
    """Histogram of object scales with half-open bins [k*w, (k+1)*w)."""

    bin_width: float
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def scale_histogram(manifest: DatasetManifest, bin_width: float) -> dict[str, ScaleHistogram]:
    """Per-class histograms of object scales over all annotated boxes."""
    if bin_width <= 0:
        raise ConfigError(f"bin_width must be positive, got {bin_width}")
    scales: dict[str, list[float]] = {name: [] for name in CLASSES}
    any_box = False
    for entry in manifest.entries:
        for box in entry.boxes:
            any_box = True
            scales[box.class_name].append(object_scale(box))
    if not any_box:
        raise ConfigError("scale_histogram requires annotations (no bounding boxes in manifest)")
    result: dict[str, ScaleHistogram] = {}
    for name, values in scales.items():
        if not values:
            continue
        arr = np.asarray(values)
        indices = np.floor(arr / bin_width).astype(int)
        n_bins = int(indices.max()) + 1
        counts = np.bincount(indices, minlength=n_bins)
        edges = np.arange(n_bins + 1) * bin_width
        result[name] = ScaleHistogram(bin_width=float(bin_width), edges=edges, counts=counts)
    return result


def write_index_csv(path: str | Path, rows: list[tuple[str, np.ndarray]]) -> None:
    """Write an index CSV from (id, label-vector) rows."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", *CLASSES])
        for sample_id, labels in rows:
            writer.writerow([sample_id, *(int(v) for v in labels)])


def write_annotations_csv(path: str | Path, rows: list[tuple[str, BoundingBox]]) -> None:
    """Write an annotation CSV from (id, box) rows."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "class", "x", "y", "w", "h"])
        for sample_id, box in rows:
            writer.writerow(
                [sample_id, box.class_name, _fmt_num(box.x), _fmt_num(box.y), _fmt_num(box.width), _fmt_num(box.height)]
            )


def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))
