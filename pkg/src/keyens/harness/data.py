"""Datasets: synthetic class-conditional blobs and the CIFAR-10 binary batch format."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError, InvalidDimensions, MalformedRecord
from ..rngcore import RngStream

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE

# Default blob geometry: class information lives on a sparse random subset of
# entries (SUPPORT_FRACTION of H*W*C). Prototypes there are
# 0.5 + SEPARATION * N(0, 1), samples add NOISE * N(0, 1); every other entry is
# a constant 0.5 background.
SEPARATION = 0.08
NOISE = 0.005
SUPPORT_FRACTION = 1 / 12

@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], self.num_classes, self.split)


def gen_synthetic(num_classes: int, height: int, width: int, channels: int, per_class: int,
                  seed: int, split: str = "train", separation: float = SEPARATION,
                  noise: float = NOISE, support: int | None = None) -> Dataset:
    """Gaussian blobs on a sparse pixel support, clamped to [0, 1].

    Prototypes and the support depend only on ``seed``, so the train and test
    splits of one seed share classes; samples come from a stream derived from
    ``split``. Examples are interleaved by class (0, 1, ..., K-1, 0, 1, ...).
    """
    d = height * width * channels
    if num_classes < 2 or min(height, width, channels) < 1 or d < num_classes or per_class < 0:
        raise InvalidDimensions("invalid synthetic dataset dimensions")
    k = support if support is not None else max(num_classes, round(d * SUPPORT_FRACTION))
    if not 1 <= k <= d:
        raise InvalidDimensions(f"support must lie in [1, {d}]")
    root = RngStream(seed)
    entries = root.derive("support").permutation(d)[:k]
    protos = np.full((num_classes, d), 0.5)
    protos[:, entries] += separation * root.derive("prototypes").normals(num_classes * k).reshape(num_classes, k)
    n = num_classes * per_class
    labels = np.tile(np.arange(num_classes), per_class)
    images = protos[labels]
    images[:, entries] += noise * root.derive(f"samples/{split}").normals(n * k).reshape(n, k)
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images.reshape(n, height, width, channels), labels, num_classes, split)


def load_cifar10_binary(path, split: str = "train") -> Dataset:
    """Read a CIFAR-10 binary batch: records of 1 label byte + R, G, B 32x32 planes."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(raw) % CIFAR_RECORD:
        raise MalformedRecord(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise MalformedRecord(f"{path}: label byte {labels.max()} out of range")
    planes = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return Dataset(images, labels, 10, split)


def load_cifar10_files(paths, split: str) -> Dataset:
    parts = [load_cifar10_binary(p, split) for p in paths]
    return Dataset(np.concatenate([p.images for p in parts]) if parts else np.zeros((0, 32, 32, 3)),
                   np.concatenate([p.labels for p in parts]) if parts else np.zeros(0, dtype=np.int64),
                   10, split)


def evaluate_clean(pipeline, dataset: Dataset, rng: RngStream | None = None) -> float:
    """Clean accuracy (%); randomized pipelines get one seeded draw per example."""
    if len(dataset) == 0:
        return 0.0
    if pipeline.randomized and rng is None:
        rng = RngStream(0)
    pred = pipeline.predict(dataset.images, rng)
    return 100.0 * float(np.mean(pred == dataset.labels))
