"""Synthetic MIL bags with planted ground truth, augmentation, and disk I/O.

Two classes are generated: ``focal`` (1-3 small bright Gaussian blobs) and
``diffuse`` (one large, low-contrast textured ellipse).  A sample is labelled
positive for a class iff at least one instance of that class was planted.

On disk a dataset split is a directory::

    images/<name>.pgm          8-bit grayscale
    masks/<name>_<k>.pgm       truth mask of class k (positives only)
    labels.csv                 filename,label_1..label_K,boxes

``boxes`` holds ``k:x:y:w:h`` entries separated by ``;`` (pixels, x = column).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

CLASS_NAMES = ("focal", "diffuse")
DEFAULT_ZOOM_RANGE = (0.25, 0.75)
ALT_ZOOM_RANGE = (0.75, 1.25)
DEFAULT_TRANSLATE_PX = 50.0
REFERENCE_SIZE = 512
DEFAULT_ROTATE_DEG = 25.0


class DataFormatError(ValueError):
    pass


Box = tuple[int, int, int, int, int]  # (class, x, y, w, h)


@dataclass
class LabeledSample:
    image: np.ndarray                     # (H, W) in [0, 1]
    labels: np.ndarray                    # (K,) of 0/1
    truth_mask: np.ndarray | None = None  # (K, H, W) binary
    boxes: list[Box] = field(default_factory=list)
    name: str = ""

    def boxes_for(self, k: int) -> list[Box]:
        return [b for b in self.boxes if b[0] == k]


@dataclass
class Dataset:
    samples: list[LabeledSample]
    class_names: tuple[str, ...] = CLASS_NAMES

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> LabeledSample:
        return self.samples[i]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def images(self) -> np.ndarray:
        """Stack to ``(n, 1, H, W)``."""
        return np.stack([s.image for s in self.samples])[:, None]

    def labels(self) -> np.ndarray:
        return np.stack([s.labels for s in self.samples]).astype(float)

    def positive_counts(self) -> list[int]:
        return [int(c) for c in self.labels().sum(axis=0)]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.class_names)


@dataclass
class SyntheticSpec:
    image_size: int = 64
    focal_radius_range: tuple[float, float] = (3.0, 6.0)
    diffuse_coverage_range: tuple[float, float] = (0.15, 0.35)
    noise_std: float = 0.05
    instance_count_range: tuple[int, int] = (1, 3)
    focal_amplitude: float = 0.45
    diffuse_amplitude: float = 0.12
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.focal_radius_range
        if not 0 < lo <= hi or 2 * hi + 2 > self.image_size:
            raise ValueError(f"focal radius range {self.focal_radius_range} does not fit a "
                             f"{self.image_size}px image")
        lo, hi = self.diffuse_coverage_range
        if not 0 < lo <= hi < 1:
            raise ValueError(f"diffuse coverage range must lie in (0, 1), got {self.diffuse_coverage_range}")
        lo, hi = self.instance_count_range
        if not 1 <= lo <= hi:
            raise ValueError(f"instance count range must satisfy 1 <= lo <= hi, got {self.instance_count_range}")


def _quantize(img: np.ndarray) -> np.ndarray:
    # generated images sit on the 8-bit grid so a disk round trip is exact
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _tight_box(k: int, mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (k, int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def _background(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1) - 0.5
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    base = rng.uniform(0.2, 0.35) + rng.uniform(0.0, 0.15) * ramp
    return base + rng.normal(0.0, spec.noise_std, (n, n))


def _plant_focal(img, spec, rng, k):
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n]
    mask = np.zeros((n, n), dtype=bool)
    boxes = []
    for _ in range(int(rng.integers(spec.instance_count_range[0], spec.instance_count_range[1] + 1))):
        radius = rng.uniform(*spec.focal_radius_range)
        cy, cx = rng.uniform(radius + 1, n - radius - 2, size=2)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        amp = spec.focal_amplitude * rng.uniform(0.8, 1.2)
        img += amp * np.exp(-d2 / (2 * (radius / 2.0) ** 2))
        blob = d2 <= radius ** 2
        mask |= blob
        boxes.append(_tight_box(k, blob))
    return mask, boxes


def _plant_diffuse(img, spec, rng, k):
    n = spec.image_size
    area = rng.uniform(*spec.diffuse_coverage_range) * n * n
    ratio = rng.uniform(0.6, 1.6)
    a = math.sqrt(area * ratio / math.pi)  # semi-axis along x
    b = math.sqrt(area / ratio / math.pi)
    a, b = min(a, n / 2 - 1), min(b, n / 2 - 1)
    cx = rng.uniform(a, n - 1 - a)
    cy = rng.uniform(b, n - 1 - b)
    yy, xx = np.mgrid[0:n, 0:n]
    mask = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (n, n)), 1.0)
    texture /= texture.std()
    amp = spec.diffuse_amplitude
    img += np.where(mask, amp * (0.6 + 0.8 * texture), 0.0)
    return mask, [_tight_box(k, mask)]


def generate(spec: SyntheticSpec, n: int, name_prefix: str = "s") -> Dataset:
    """``n`` samples, deterministic in ``spec.seed``; each class is present with probability 0.5."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    samples = []
    for i in range(n):
        labels = (rng.random(len(CLASS_NAMES)) < 0.5).astype(np.int64)
        img = _background(spec, rng)
        masks = np.zeros((len(CLASS_NAMES), size, size), dtype=np.uint8)
        boxes: list[Box] = []
        planters = (_plant_focal, _plant_diffuse)
        for k in range(len(CLASS_NAMES)):
            if labels[k]:
                mask, bx = planters[k](img, spec, rng, k)
                masks[k] = mask
                boxes.extend(bx)
        samples.append(LabeledSample(_quantize(img), labels, masks, boxes, f"{name_prefix}{i:05d}"))
    return Dataset(samples)


# -- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    zoom: float
    tx: float      # pixels, columns
    ty: float      # pixels, rows
    angle: float   # degrees

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(1.0, 0.0, 0.0, 0.0)


def sample_augmentation(rng: np.random.Generator, image_size: int,
                        zoom_range: tuple[float, float] = DEFAULT_ZOOM_RANGE) -> AugmentParams:
    """Zoom, translation and rotation drawn uniformly; translation scales with image size."""
    shift = DEFAULT_TRANSLATE_PX * image_size / REFERENCE_SIZE
    zoom = rng.uniform(*zoom_range)
    tx, ty = rng.uniform(-shift, shift, size=2)
    angle = rng.uniform(-DEFAULT_ROTATE_DEG, DEFAULT_ROTATE_DEG)
    return AugmentParams(float(zoom), float(tx), float(ty), float(angle))


def apply_augmentation(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Bilinear resampling about the image centre; outside pixels are zero; output clipped to [0, 1]."""
    h, w = image.shape
    if h != w:
        raise ValueError(f"augment expects a square image, got {h}x{w}")
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    t = np.array([params.ty, params.tx])
    th = np.deg2rad(params.angle)
    # maps output (row, col) to input (row, col): inverse rotation then inverse zoom
    inv_rot = np.array([[np.cos(th), np.sin(th)], [-np.sin(th), np.cos(th)]])
    matrix = inv_rot / params.zoom
    offset = c - matrix @ (c + t)
    out = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, rng: np.random.Generator,
            zoom_range: tuple[float, float] = DEFAULT_ZOOM_RANGE) -> np.ndarray:
    return apply_augmentation(image, sample_augmentation(rng, image.shape[0], zoom_range))


# -- resampling ----------------------------------------------------------------

def area_downsample(arr: np.ndarray, size: int) -> np.ndarray:
    """Area-average a square array down to ``size``; integer factors are exact block means."""
    h, w = arr.shape
    if (h, w) == (size, size):
        return arr.astype(float)
    if h % size == 0 and w % size == 0:
        fh, fw = h // size, w // size
        return arr.reshape(size, fh, size, fw).mean(axis=(1, 3))
    if size > min(h, w):
        raise ValueError(f"cannot area-downsample {h}x{w} up to {size}")
    img = Image.fromarray(arr.astype(np.float32), mode="F").resize((size, size), Image.Resampling.BOX)
    return np.asarray(img, dtype=float)


def mask_at(mask: np.ndarray, size: int) -> np.ndarray:
    """Ground-truth mask area-downsampled to ``size``; values >= 0.5 count as foreground."""
    return (area_downsample(mask.astype(float), size) >= 0.5).astype(np.uint8)


def upsample_nearest(S: np.ndarray, size: int) -> np.ndarray:
    """Replicate each saliency cell into a block so the map matches image pixels."""
    n = S.shape[-1]
    if size % n:
        raise ValueError(f"image size {size} is not a multiple of saliency size {n}")
    f = size // n
    return np.repeat(np.repeat(S, f, axis=-2), f, axis=-1)


# -- disk layout -----------------------------------------------------------------

def write_gray(path: Path, arr01: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(arr01, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=float) / 255.0


def format_boxes(boxes: Sequence[Box]) -> str:
    return ";".join(":".join(str(v) for v in b) for b in boxes)


def parse_boxes(text: str, num_classes: int, line: int) -> list[Box]:
    boxes = []
    for item in filter(None, (t.strip() for t in text.split(";"))):
        parts = item.split(":")
        try:
            k, x, y, w, h = (int(p) for p in parts)
        except ValueError:
            raise DataFormatError(f"labels.csv line {line}: malformed box {item!r} (want k:x:y:w:h)") from None
        if not 0 <= k < num_classes or w <= 0 or h <= 0:
            raise DataFormatError(f"labels.csv line {line}: invalid box {item!r}")
        boxes.append((k, x, y, w, h))
    return boxes


def _scale_box(box: Box, scale: float) -> Box:
    k, x, y, w, h = box
    x0, y0 = math.floor(x * scale), math.floor(y * scale)
    x1, y1 = math.ceil((x + w) * scale), math.ceil((y + h) * scale)
    return (k, x0, y0, max(x1 - x0, 1), max(y1 - y0, 1))


def write_dataset(ds: Dataset, root: Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    K = ds.num_classes
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename"] + [f"label_{k + 1}" for k in range(K)] + ["boxes"])
        for s in ds.samples:
            fname = f"{s.name}.pgm"
            write_gray(root / "images" / fname, s.image)
            if s.truth_mask is not None:
                for k in range(K):
                    if s.labels[k]:
                        write_gray(root / "masks" / f"{s.name}_{k}.pgm", s.truth_mask[k].astype(float))
            writer.writerow([fname] + [int(v) for v in s.labels] + [format_boxes(s.boxes)])


def ingest(directory: Path, labels_file: Path | None = None, input_size: int | None = None,
           class_names: Sequence[str] | None = None) -> Dataset:
    """Load a split directory; images are area-downsampled to ``input_size`` when given.

    Boxes and masks stay in source-image pixels.
    """
    directory = Path(directory)
    labels_file = Path(labels_file) if labels_file else directory / "labels.csv"
    if not labels_file.is_file():
        raise FileNotFoundError(f"labels file not found: {labels_file}")
    with open(labels_file, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{labels_file}: empty file")
    header = rows[0]
    label_cols = [i for i, h in enumerate(header) if h.startswith("label_")]
    K = len(label_cols)
    has_boxes = "boxes" in header
    if K == 0 or header[0] != "filename" or label_cols != list(range(1, K + 1)):
        raise DataFormatError(f"{labels_file} line 1: header must be filename,label_1..label_K[,boxes]")
    if class_names is not None and len(class_names) != K:
        raise DataFormatError(f"{labels_file}: {K} label columns but {len(class_names)} classes expected")
    samples = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        expected = len(header)
        if len(row) != expected:
            got = len(row) - 1 - (1 if has_boxes else 0)
            raise DataFormatError(f"{labels_file} line {line}: expected {K} labels, got {got}")
        try:
            labels = np.array([int(v) for v in row[1:K + 1]], dtype=np.int64)
        except ValueError:
            raise DataFormatError(f"{labels_file} line {line}: labels must be 0/1 integers") from None
        if not np.isin(labels, (0, 1)).all():
            raise DataFormatError(f"{labels_file} line {line}: labels must be 0 or 1")
        boxes = parse_boxes(row[K + 1], K, line) if has_boxes else []
        path = directory / "images" / row[0]
        if not path.is_file():
            path = directory / row[0]
        if not path.is_file():
            raise FileNotFoundError(f"{labels_file} line {line}: image {row[0]!r} not found")
        image = read_gray(path)
        stem = Path(row[0]).stem
        masks = None
        mask_dir = directory / "masks"
        if mask_dir.is_dir():
            masks = np.zeros((K,) + image.shape, dtype=np.uint8)
            for k in range(K):
                mpath = mask_dir / f"{stem}_{k}.pgm"
                if mpath.is_file():
                    masks[k] = read_gray(mpath) >= 0.5
        if input_size is not None and image.shape[0] != input_size:
            scale = input_size / image.shape[0]
            boxes = [_scale_box(b, scale) for b in boxes]
            image = area_downsample(image, input_size)
        samples.append(LabeledSample(image, labels, masks, boxes, stem))
    names = tuple(class_names) if class_names else (CLASS_NAMES if K == len(CLASS_NAMES)
                                                    else tuple(f"class_{k + 1}" for k in range(K)))
    return Dataset(samples, names)
