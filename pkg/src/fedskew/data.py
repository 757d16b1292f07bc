"""Datasets: the CIFAR-10 binary batches and a Gaussian-blob stand-in."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10_000
CIFAR_FILE_BYTES = CIFAR_RECORD * CIFAR_RECORDS_PER_FILE
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DatasetError("features must be 2-D with one row per label")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise DatasetError(f"missing CIFAR-10 batch file: {path}")
    size = path.stat().st_size
    if size != CIFAR_FILE_BYTES:
        complete = min(size, CIFAR_FILE_BYTES) // CIFAR_RECORD
        raise DatasetError(
            f"{path}: expected {CIFAR_FILE_BYTES} bytes, found {size}; "
            f"data ends or diverges at record {complete} (byte offset {complete * CIFAR_RECORD})"
        )
    raw = np.fromfile(path, dtype=np.uint8).reshape(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetError(
            f"{path}: label byte {labels[bad]} out of range at offset {bad * CIFAR_RECORD}"
        )
    return raw[:, 1:], labels


def load_cifar10(dir_path) -> tuple[Dataset, Dataset]:
    """Parse the six CIFAR-10 binary batches under ``dir_path``.

    Pixels (R, G and B planes of 1024 bytes each) are scaled to [0, 1], then
    the per-channel mean of the training split is subtracted from both
    splits. Features are stored as float32 to keep the training matrix near
    600 MB; model arithmetic upcasts to float64.
    """
    root = Path(dir_path)
    train = [_read_cifar_file(root / name) for name in CIFAR_TRAIN_FILES]
    test_px, test_y = _read_cifar_file(root / CIFAR_TEST_FILE)
    train_px = np.concatenate([px for px, _ in train])
    train_y = np.concatenate([y for _, y in train])

    channel_mean = (
        train_px.reshape(len(train_px), 3, 1024).mean(axis=(0, 2), dtype=np.float64) / 255.0
    )
    offset = np.repeat(channel_mean, 1024).astype(np.float32)

    def prep(px):
        out = px.astype(np.float32)
        out /= np.float32(255.0)
        out -= offset
        return out

    return (
        Dataset(prep(train_px), train_y, 10, "train"),
        Dataset(prep(test_px), test_y, 10, "test"),
    )


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    input_dim: int = 32
    train_per_class: int = 400
    test_per_class: int = 200
    separation: float = 3.5
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "input_dim", "train_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.separation < 0 or self.noise < 0:
            raise ValueError("separation and noise must be non-negative")


def class_directions(num_classes: int, input_dim: int, seed: int) -> np.ndarray:
    """Unit vectors, one row per class; orthonormal when ``num_classes <= input_dim``."""
    rng = np.random.default_rng([seed, 0])
    g = rng.standard_normal((input_dim, max(num_classes, 1)))
    if num_classes <= input_dim:
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        return q[:, :num_classes].T.copy()
    return (g / np.linalg.norm(g, axis=0)).T.copy()


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Balanced isotropic Gaussian blobs centred at ``separation * u_c``."""
    centers = spec.separation * class_directions(spec.num_classes, spec.input_dim, spec.seed)

    def draw(per_class, stream, split):
        rng = np.random.default_rng([spec.seed, stream])
        y = np.repeat(np.arange(spec.num_classes), per_class)
        x = centers[y] + spec.noise * rng.standard_normal((len(y), spec.input_dim))
        perm = rng.permutation(len(y))
        return Dataset(x[perm], y[perm], spec.num_classes, split)

    return draw(spec.train_per_class, 1, "train"), draw(spec.test_per_class, 2, "test")
