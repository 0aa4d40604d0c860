"""Synthetic shape images and the binary dataset file format."""

import struct
from dataclasses import dataclass

import numpy as np

from .grid import RandomStream

DATASET_MAGIC = b"SSDS"
DATASET_VERSION = 1

CLASS_NAMES = ("square", "cross", "diagonal", "ring")


def _templates():
    # every shape covers 16 pixels so total brightness carries no class signal
    square = np.ones((4, 4), dtype=bool)
    cross = np.eye(8, dtype=bool) | np.fliplr(np.eye(8, dtype=bool))
    diagonal = np.zeros((8, 9), dtype=bool)
    for i in range(8):
        diagonal[i, i] = diagonal[i, i + 1] = True
    ring = np.ones((5, 5), dtype=bool)
    ring[1:-1, 1:-1] = False
    return (square, cross, diagonal, ring)


SHAPES = _templates()


class DatasetFormatError(ValueError):
    """Raised for unreadable dataset files (bad magic, version, truncation)."""


@dataclass
class ShapesConfig:
    """Generator settings.

    Each image's background is uniform noise on ``[0, A]`` where the
    amplitude ``A`` is itself drawn uniformly from ``[0, noise]``.
    """

    h: int = 16
    w: int = 16
    class_count: int = 4
    n_train: int = 4000
    n_test: int = 1000
    n_holdout: int = 100
    fg_low: float = 0.6
    fg_high: float = 1.0
    noise: float = 0.5
    seed: int = 0

    def validate(self):
        if not 1 <= self.class_count <= len(SHAPES):
            raise ValueError(f"class_count must be in [1, {len(SHAPES)}]")
        for t in SHAPES[:self.class_count]:
            if t.shape[0] > self.h or t.shape[1] > self.w:
                raise ValueError(f"shape {t.shape} does not fit in a {self.h}x{self.w} canvas")
        if not (0 <= self.noise < self.fg_low <= self.fg_high <= 1):
            raise ValueError("need 0 <= noise < fg_low <= fg_high <= 1")


@dataclass
class LabeledDataset:
    """Images ``(n, h, w)`` float32 in [0, 1] with integer labels.

    ``shape_masks`` (and ``second_labels`` / ``second_masks`` for two-object
    data) hold the ground-truth shape pixels. They are diagnostics only and
    are not written to dataset files.
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = ""
    shape_masks: np.ndarray = None
    second_labels: np.ndarray = None
    second_masks: np.ndarray = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ValueError("images must have shape (n, h, w)")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label out of range")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]


def _place(canvas, owner, template, top, left, value):
    th, tw = template.shape
    region = (slice(top, top + th), slice(left, left + tw))
    canvas[region][template] = value
    owner[region] |= template


def _apart(a, b):
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def _draw_images(cfg, n, rs, n_objects):
    h, w = cfg.h, cfg.w
    images = np.empty((n, h, w), dtype=np.float32)
    labels = np.empty((n, n_objects), dtype=np.int64)
    masks = np.zeros((n, n_objects, h, w), dtype=bool)
    for i in range(n):
        amplitude = cfg.noise * rs.random()
        canvas = rs.random((h, w)) * amplitude
        if n_objects == 1:
            classes = [int(rs.integers(0, cfg.class_count))]
        else:
            classes = [int(c) for c in rs.choice(cfg.class_count, size=2)]
            while classes[0] == classes[1]:
                classes[1] = int(rs.integers(0, cfg.class_count))
        # redraw every position jointly until the bounding boxes are disjoint
        for _ in range(1000):
            boxes = []
            for c in classes:
                th, tw = SHAPES[c].shape
                top = int(rs.integers(0, h - th + 1))
                left = int(rs.integers(0, w - tw + 1))
                boxes.append((top, left, top + th, left + tw))
            if all(_apart(boxes[j], boxes[k])
                   for j in range(len(boxes)) for k in range(j)):
                break
        else:
            raise RuntimeError(f"could not place {n_objects} disjoint shapes on sample {i}")
        for k, (c, box) in enumerate(zip(classes, boxes)):
            value = cfg.fg_low + (cfg.fg_high - cfg.fg_low) * rs.random()
            _place(canvas, masks[i, k], SHAPES[c], box[0], box[1], value)
        images[i] = canvas
        labels[i] = classes
    return images, labels, masks


def generate_shapes(cfg, n=None, split="train", task_id=0):
    """One shape per image over uniform background noise.

    ``n`` defaults to the split size in ``cfg``; ``task_id`` separates the
    random streams of different splits.
    """
    cfg.validate()
    if n is None:
        n = {"train": cfg.n_train, "test": cfg.n_test, "holdout": cfg.n_holdout}[split]
    images, labels, masks = _draw_images(cfg, n, RandomStream(cfg.seed, task_id), 1)
    return LabeledDataset(images, labels[:, 0], cfg.class_count, split, shape_masks=masks[:, 0])


def generate_splits(cfg):
    """Train, test and holdout datasets with independent streams."""
    return {
        split: generate_shapes(cfg, split=split, task_id=k)
        for k, split in enumerate(("train", "test", "holdout"))
    }


def generate_two_object(cfg, n, seed, split="two_object"):
    """Two shapes of distinct classes per image with disjoint bounding boxes.

    The primary label is the first shape's class; the second is kept in
    ``second_labels``.
    """
    cfg.validate()
    if cfg.class_count < 2:
        raise ValueError("two-object images need at least two classes")
    images, labels, masks = _draw_images(cfg, n, RandomStream(seed, 1000), 2)
    return LabeledDataset(
        images, labels[:, 0], cfg.class_count, split,
        shape_masks=masks[:, 0], second_labels=labels[:, 1], second_masks=masks[:, 1],
    )


def save_dataset(ds, path):
    n = len(ds)
    h, w = ds.images.shape[1:]
    if ds.class_count > 255:
        raise ValueError("labels are stored as u8; class_count must be <= 255")
    header = DATASET_MAGIC + struct.pack("<IIHHH", DATASET_VERSION, n, h, w, ds.class_count)
    rec = np.dtype([("label", "u1"), ("pixels", "<f4", (h * w,))])
    body = np.empty(n, dtype=rec)
    body["label"] = ds.labels
    body["pixels"] = ds.images.reshape(n, h * w)
    with open(path, "wb") as fh:
        fh.write(header + body.tobytes())


def load_dataset(path, split=""):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 18:
        raise DatasetFormatError(f"{path}: truncated header")
    version, n, h, w, C = struct.unpack("<IIHHH", data[4:18])
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    rec = np.dtype([("label", "u1"), ("pixels", "<f4", (h * w,))])
    if len(data) != 18 + n * rec.itemsize:
        raise DatasetFormatError(
            f"{path}: expected {18 + n * rec.itemsize} bytes for {n} samples, got {len(data)}"
        )
    body = np.frombuffer(data, dtype=rec, offset=18, count=n)
    images = body["pixels"].reshape(n, h, w).astype(np.float32)
    return LabeledDataset(images, body["label"].astype(np.int64), C, split)
