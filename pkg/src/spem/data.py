"""CIFAR binary ingestion, augmentation, normalization and synthetic data."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError

PIXELS = 3 * 32 * 32
VARIANTS = {
    # name: (label bytes, classes, train files, test files)
    "cifar10": (1, 10, [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    "cifar100": (2, 100, ["train.bin"], ["test.bin"]),
}
SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}

# published per-channel statistics of the training splits, in [0, 1] units
STANDARD_STATS = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}


@dataclass
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, images: np.ndarray, dtype=np.float64) -> np.ndarray:
        """(x / 255 - mean) / std, per channel, for uint8 N x 3 x H x W images."""
        x = images.astype(dtype) / 255.0
        x -= self.mean.astype(dtype).reshape(1, 3, 1, 1)
        x /= self.std.astype(dtype).reshape(1, 3, 1, 1)
        return x


@dataclass
class Dataset:
    images: np.ndarray  # uint8, N x 3 x 32 x 32, planes R, G, B
    labels: np.ndarray  # int64
    num_classes: int
    coarse_labels: Optional[np.ndarray] = None
    name: str = "dataset"
    _norm: Optional[Normalization] = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.labels)

    def normalization(self) -> Normalization:
        """Per-channel mean/std of this split, computed once and cached."""
        if self._norm is None:
            x = self.images.astype(np.float64) / 255.0
            std = x.std(axis=(0, 2, 3))
            # a flat channel carries no signal; leave its scale alone instead of dividing by zero
            self._norm = Normalization(x.mean(axis=(0, 2, 3)), np.where(std > 0, std, 1.0))
        return self._norm

    def subset(self, n: Optional[int]) -> "Dataset":
        if n is None or n >= len(self):
            return self
        coarse = None if self.coarse_labels is None else self.coarse_labels[:n]
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, coarse, self.name)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def decode_records(raw: bytes, variant: str = "cifar10", source: str = "<bytes>") -> Dataset:
    """Decode a CIFAR binary blob byte-for-byte."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    nlabel, classes, _, _ = VARIANTS[variant]
    rec = nlabel + PIXELS
    if len(raw) % rec:
        whole = len(raw) // rec
        raise FormatError(f"{source}: size {len(raw)} is not a multiple of the {rec}-byte record; "
                          f"trailing partial record at byte offset {whole * rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, nlabel - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        raise FormatError(f"{source}: label {labels[bad[0]]} out of range at byte offset {bad[0] * rec + nlabel - 1}")
    coarse = arr[:, 0].astype(np.int64) if nlabel == 2 else None
    images = arr[:, nlabel:].reshape(-1, 3, 32, 32).copy()
    return Dataset(images, labels, classes, coarse, name=variant)


def encode_records(ds: Dataset, variant: str = "cifar10") -> bytes:
    """Inverse of :func:`decode_records`."""
    nlabel = VARIANTS[variant][0]
    n = len(ds)
    out = np.empty((n, nlabel + PIXELS), dtype=np.uint8)
    if nlabel == 2:
        coarse = ds.coarse_labels if ds.coarse_labels is not None else np.zeros(n, np.int64)
        out[:, 0] = coarse
    out[:, nlabel - 1] = ds.labels
    out[:, nlabel:] = ds.images.reshape(n, PIXELS)
    return out.tobytes()


def _concat(parts: Sequence[Dataset], name: str) -> Dataset:
    coarse = None
    if parts[0].coarse_labels is not None:
        coarse = np.concatenate([p.coarse_labels for p in parts])
    return Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
                   parts[0].num_classes, coarse, name)


def _resolve_dir(path, variant: str) -> Path:
    root = Path(path)
    nested = root / SUBDIRS[variant]
    return nested if nested.is_dir() else root


def load_cifar(path, variant: str = "cifar10") -> Tuple[Dataset, Dataset]:
    """Load the train and test splits of a CIFAR binary distribution."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    root = _resolve_dir(path, variant)
    _, _, train_files, test_files = VARIANTS[variant]

    def load(files, split):
        parts = []
        for f in files:
            p = root / f
            if not p.is_file():
                raise FileNotFoundError(f"missing CIFAR file {p}")
            parts.append(decode_records(p.read_bytes(), variant, str(p)))
        return _concat(parts, f"{variant}-{split}")

    return load(train_files, "train"), load(test_files, "test")


@dataclass
class AugmentConfig:
    pad: int = 4
    crop: int = 32
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.crop > 32 + 2 * self.pad:
            raise ConfigError(f"crop {self.crop} exceeds padded size {32 + 2 * self.pad}")


def crop_and_flip(pixels: np.ndarray, offset: Tuple[int, int], flip: bool, cfg: AugmentConfig) -> np.ndarray:
    """Zero-pad, cut a ``crop`` x ``crop`` window at ``offset``, optionally mirror."""
    p = cfg.pad
    padded = np.pad(pixels, ((0, 0), (p, p), (p, p)))
    i, j = offset
    out = padded[:, i:i + cfg.crop, j:j + cfg.crop]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Generator for one sample's augmentation draws, independent of iteration order."""
    return np.random.default_rng([seed, epoch, index])


def augment(pixels: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
            norm: Normalization, dtype=np.float64) -> np.ndarray:
    """Random crop, random horizontal flip, then normalization of one 3 x 32 x 32 image."""
    hi = 32 + 2 * cfg.pad - cfg.crop
    offset = tuple(int(v) for v in rng.integers(0, hi + 1, size=2))
    flip = bool(rng.random() < cfg.flip_prob)
    return norm.apply(crop_and_flip(pixels, offset, flip, cfg)[None], dtype)[0]


def augment_batch(images: np.ndarray, indices: Sequence[int], cfg: AugmentConfig, norm: Normalization,
                  seed: int, epoch: int, dtype=np.float64) -> np.ndarray:
    hi = 32 + 2 * cfg.pad - cfg.crop
    out = np.empty((len(indices), 3, cfg.crop, cfg.crop), dtype=np.uint8)
    for k, idx in enumerate(indices):
        rng = sample_rng(seed, epoch, int(idx))
        offset = tuple(int(v) for v in rng.integers(0, hi + 1, size=2))
        flip = bool(rng.random() < cfg.flip_prob)
        out[k] = crop_and_flip(images[idx], offset, flip, cfg)
    return norm.apply(out, dtype)


@functools.lru_cache(maxsize=8)
def _prototypes(num_classes: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xB10B])
    yy, xx = np.mgrid[0:32, 0:32]
    protos = np.empty((num_classes, 3, 32, 32))
    for k in range(num_classes):
        color = rng.uniform(-90, 90, size=3)
        cy, cx = rng.uniform(8, 24, size=2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 6.0 ** 2))
        protos[k] = 128 + color[:, None, None] * (0.35 + 0.65 * blob)
    return protos


def synthetic(num_samples: int, num_classes: int = 10, seed: int = 0, sigma: float = 20.0) -> Dataset:
    """Class-conditional Gaussian images around per-class colored blob prototypes.

    Labels cycle through the classes before shuffling, so every class has
    ``num_samples // num_classes`` or one more samples.
    """
    if num_samples < num_classes:
        raise ConfigError(f"need at least one sample per class ({num_samples} < {num_classes})")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_samples) % num_classes).astype(np.int64)
    protos = _prototypes(num_classes, seed)
    noise = rng.normal(0.0, sigma, size=(num_samples, 3, 32, 32)) if sigma > 0 else 0.0
    images = np.clip(np.rint(protos[labels] + noise), 0, 255).astype(np.uint8)
    return Dataset(images, labels, num_classes, name="synthetic")


def synthetic_splits(num_train: int, num_test: int, num_classes: int = 10, seed: int = 0,
                     sigma: float = 20.0) -> Tuple[Dataset, Dataset]:
    """Train/test splits drawn around the same prototypes."""
    train = synthetic(num_train, num_classes, seed, sigma)
    rng = np.random.default_rng([seed, 1])
    labels = rng.permutation(np.arange(num_test) % num_classes).astype(np.int64)
    noise = rng.normal(0.0, sigma, size=(num_test, 3, 32, 32)) if sigma > 0 else 0.0
    images = np.clip(np.rint(_prototypes(num_classes, seed)[labels] + noise), 0, 255).astype(np.uint8)
    return train, Dataset(images, labels, num_classes, name="synthetic")
