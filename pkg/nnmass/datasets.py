"""
Synthetic two-class datasets and MNIST IDX ingestion.

Seg-n splits [0, 1) into n segments and Circle-n splits the unit disc into n concentric rings; in both the label is
    the parity of the segment (ring) a sample falls in, using half-open intervals [s / n, (s + 1) / n).
"""
import csv
import logging
import math
import re
import struct

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConsistencyError, FormatError, RangeError, reading
from .utils import derive_seed, generator

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

TRAIN_SAMPLES = 60000
TEST_SAMPLES = 12000


@dataclass(frozen=True)
class Dataset:
    """
    Features and labels. The arrays are made read-only on construction.

    Args:
        features (numpy.ndarray): (n_samples, feature_dim) float64.
        labels (numpy.ndarray): (n_samples,) integers in [0, n_classes - 1].
        n_classes (int): Number of classes.
        provenance (str): "seg", "circle" or "idx".
        parameters (dict): The generator parameters or source files, plus the image shape for "idx".
        seed (int, optional): The generator seed, None for loaded files.
    """
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: str
    parameters: dict = field(default_factory=dict)
    seed: Optional[int] = None

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ConsistencyError("Feature and label counts differ",
                                   features=len(self.features), labels=len(self.labels))
        self.features.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self):
        return len(self.labels)

    @property
    def feature_dim(self):
        return self.features.shape[1]


def _check_generator_args(n, n_samples):
    if n < 2:
        raise RangeError(f"At least two segments are required, got {n}", n=n)
    if n_samples < 1:
        raise RangeError(f"At least one sample is required, got {n_samples}", n_samples=n_samples)


def gen_seg(n_segments, n_samples, seed):
    """
    Seg-n: x uniform within a uniformly chosen segment s of [0, 1), feature [x, x], label s mod 2.
    """
    _check_generator_args(n_segments, n_samples)
    rng = generator(seed)
    segments = rng.integers(0, n_segments, size=n_samples)
    x = (segments + rng.random(n_samples)) / n_segments
    return Dataset(np.column_stack([x, x]), (segments % 2).astype(np.int64), 2, "seg",
                   {"n_segments": n_segments, "n_samples": n_samples}, int(seed))


def gen_circle(n_rings, n_samples, seed):
    """
    Circle-n: radius uniform within a uniformly chosen ring s, angle uniform in [0, 2 pi),
        feature [r cos(theta), r sin(theta)], label s mod 2.
    """
    _check_generator_args(n_rings, n_samples)
    rng = generator(seed)
    rings = rng.integers(0, n_rings, size=n_samples)
    radius = (rings + rng.random(n_samples)) / n_rings
    theta = rng.uniform(0.0, 2 * math.pi, size=n_samples)
    features = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
    return Dataset(features, (rings % 2).astype(np.int64), 2, "circle",
                   {"n_rings": n_rings, "n_samples": n_samples}, int(seed))


# region IDX
def _read(path):
    with open(path, "rb") as rb:
        return rb.read()


def load_idx(images_path, labels_path):
    """
    Load an IDX image/label file pair, ie MNIST.

    Format (all integers big-endian 32-bit):
        images: magic 2051, count, rows, cols, then count * rows * cols unsigned bytes
        labels: magic 2049, count, then count unsigned bytes

    Pixels are scaled to [0, 1] and each image is flattened row-wise.

    Raises:
        FormatError: On a bad magic number, a truncated or oversized file, or a label above 9. Names the file.
        ConsistencyError: If the two files hold different numbers of items.
    """
    images = _read(images_path)
    labels = _read(labels_path)

    if len(images) < 16:
        raise FormatError(f"{images_path} is too short for an IDX image header", path=str(images_path))
    magic, count, rows, cols = struct.unpack_from(">IIII", images)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"Magic number mismatch in image file {images_path} ({magic})",
                          path=str(images_path), magic=magic)
    if len(images) != 16 + count * rows * cols:
        raise FormatError(f"{images_path} holds {len(images) - 16} pixel bytes, expected {count * rows * cols}",
                          path=str(images_path))

    if len(labels) < 8:
        raise FormatError(f"{labels_path} is too short for an IDX label header", path=str(labels_path))
    magic, label_count = struct.unpack_from(">II", labels)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"Magic number mismatch in label file {labels_path} ({magic})",
                          path=str(labels_path), magic=magic)
    if len(labels) != 8 + label_count:
        raise FormatError(f"{labels_path} holds {len(labels) - 8} labels, expected {label_count}",
                          path=str(labels_path))

    if label_count != count:
        raise ConsistencyError(f"{images_path} has {count} images but {labels_path} has {label_count} labels",
                               images=count, labels=label_count)

    pixels = np.frombuffer(images, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    label_values = np.frombuffer(labels, dtype=np.uint8, offset=8).astype(np.int64)
    if label_values.size and label_values.max() > 9:
        raise FormatError(f"{labels_path} has a label above 9", path=str(labels_path))

    logger.info("Loaded %d images of %dx%d from %s", count, rows, cols, images_path)
    return Dataset(pixels / 255.0, label_values, 10, "idx",
                   {"images": str(images_path), "labels": str(labels_path), "rows": rows, "cols": cols})


def write_idx(dataset, images_path, labels_path):
    """
    Write a dataset back out as an IDX pair. Features must be multiples of 1/255 in [0, 1], as `load_idx` produces.

    The image shape comes from the dataset's "rows"/"cols" parameters, falling back to square images, then to a single
        row.
    """
    rows = dataset.parameters.get("rows")
    cols = dataset.parameters.get("cols")
    if rows is None or cols is None:
        side = math.isqrt(dataset.feature_dim)
        rows, cols = (side, side) if side * side == dataset.feature_dim else (1, dataset.feature_dim)

    pixels = np.rint(np.asarray(dataset.features) * 255.0)
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
        raise RangeError("IDX pixels must lie in [0, 1]")

    with open(images_path, "wb") as wb:
        wb.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(dataset), rows, cols))
        wb.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as wb:
        wb.write(struct.pack(">II", IDX_LABELS_MAGIC, len(dataset)))
        wb.write(np.asarray(dataset.labels).astype(np.uint8).tobytes())
# endregion


def export_csv(dataset, stream):
    """One row per sample: the feature columns x0, x1, ... then "label"."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow([f"x{k}" for k in range(dataset.feature_dim)] + ["label"])
    for features, label in zip(dataset.features, dataset.labels):
        writer.writerow([*features.tolist(), int(label)])


@dataclass(frozen=True)
class DatasetRef:
    """
    A reference to a train/test pair, as sweep grids and the CLI name them.

    Args:
        kind (str): "seg", "circle" or "idx".
        n (int): Segments or rings for the synthetic kinds.
        train_samples (int): Synthetic training set size.
        test_samples (int): Synthetic test set size.
        train_images, train_labels, test_images, test_labels (str): IDX files for kind "idx".
    """
    kind: str = "circle"
    n: int = 20
    train_samples: int = TRAIN_SAMPLES
    test_samples: int = TEST_SAMPLES
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("seg", "circle", "idx"):
            raise RangeError(f"Unknown dataset kind {self.kind!r}", kind=self.kind)
        if self.kind == "idx" and not all((self.train_images, self.train_labels, self.test_images, self.test_labels)):
            raise RangeError("IDX datasets need train and test image and label files")

    @classmethod
    def parse(cls, text, **kwargs):
        """Parse names like "circle20" or "seg30"."""
        match = re.fullmatch(r"(seg|circle)(\d+)", text.strip().lower())
        if not match:
            raise RangeError(f"Cannot parse dataset name {text!r}", name=text)
        return cls(match.group(1), int(match.group(2)), **kwargs)

    def to_dict(self):
        return {key: value for key, value in self.__dict__.items() if value is not None}

    @classmethod
    def from_dict(cls, data):
        with reading("dataset reference"):
            return cls(**data)


def load_ref(ref, seed):
    """
    Materialize a DatasetRef as (train, test).

    Synthetic test sets draw from a different derived seed than their training sets.
    """
    if ref.kind == "idx":
        return load_idx(ref.train_images, ref.train_labels), load_idx(ref.test_images, ref.test_labels)

    make = gen_seg if ref.kind == "seg" else gen_circle
    return (make(ref.n, ref.train_samples, derive_seed(seed, 0)),
            make(ref.n, ref.test_samples, derive_seed(seed, 1)))
