"""Dataset ingestion, synthesis, preprocessing, and seeded batch iteration.

Supported on-disk formats are the MNIST-family IDX files (gzip accepted and
decompressed transparently) and CIFAR-10 binary batches (3073-byte records:
1 label byte + 32x32 R, G, B planes).  A seeded synthesizer provides small
labelled image sets with a controllable difficulty axis for desk-scale runs.

Everything is deterministic: loaders are pure functions of their input bytes,
splits and per-epoch shuffles are pure functions of their seeds.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073


class DataError(Exception):
    """Base class for dataset ingestion failures."""


class BadMagicError(DataError):
    def __init__(self, path, expected: int, actual: int) -> None:
        self.path, self.expected, self.actual = path, expected, actual
        super().__init__(f"{path}: bad IDX magic 0x{actual:08x}, expected 0x{expected:08x}")


class TruncatedFileError(DataError):
    def __init__(self, path, expected_bytes: int, actual_bytes: int) -> None:
        self.path, self.expected_bytes, self.actual_bytes = path, expected_bytes, actual_bytes
        super().__init__(f"{path}: truncated, expected {expected_bytes} bytes, got {actual_bytes}")


class CountMismatchError(DataError):
    def __init__(self, image_count: int, label_count: int) -> None:
        self.image_count, self.label_count = image_count, label_count
        super().__init__(f"image count {image_count} != label count {label_count}")


class RecordSizeError(DataError):
    def __init__(self, path, length: int) -> None:
        self.path, self.length = path, length
        super().__init__(f"{path}: length {length} is not a multiple of {CIFAR_RECORD_BYTES}")


@dataclass
class Dataset:
    """Images as N x C x H x W float32 plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"images must be NCHW, got shape {self.images.shape}")
        n = self.images.shape[0]
        if n < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.labels.shape != (n,):
            raise ValueError(f"labels shape {self.labels.shape} does not match N={n}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if not np.isfinite(self.images).all():
            raise ValueError("images contain non-finite values")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices],
                       self.num_classes, name if name is not None else self.name)


@dataclass
class SplitPair:
    train: Dataset
    val: Dataset
    val_fraction: float
    seed: int


@dataclass(frozen=True)
class SynthSpec:
    """Seeded synthetic image classification task.

    ``easy`` uses per-class orthogonal binary masks at amplitude 1.0 with
    Gaussian noise sigma 0.1; ``hard`` uses masks with shared support and
    sigma 0.8, so classes overlap heavily.
    """

    num_classes: int = 4
    samples_per_class: int = 50
    image_size: int = 16
    difficulty: str = "easy"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.difficulty not in ("easy", "hard"):
            raise ValueError(f"difficulty must be 'easy' or 'hard', got {self.difficulty!r}")


# ---------------------------------------------------------------------------
# IDX loading
# ---------------------------------------------------------------------------

def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path, name: str = "", num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label file pair into a 1-channel dataset in [0, 1]."""
    img_bytes = _read_maybe_gzip(images_path)
    if len(img_bytes) < 16:
        raise TruncatedFileError(images_path, 16, len(img_bytes))
    magic, n, h, w = struct.unpack(">IIII", img_bytes[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(images_path, IDX_IMAGES_MAGIC, magic)
    expected = 16 + n * h * w
    if len(img_bytes) < expected:
        raise TruncatedFileError(images_path, expected, len(img_bytes))
    images = np.frombuffer(img_bytes, dtype=np.uint8, count=n * h * w, offset=16)
    images = images.reshape(n, 1, h, w).astype(np.float32) / 255.0

    lbl_bytes = _read_maybe_gzip(labels_path)
    if len(lbl_bytes) < 8:
        raise TruncatedFileError(labels_path, 8, len(lbl_bytes))
    lmagic, ln = struct.unpack(">II", lbl_bytes[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise BadMagicError(labels_path, IDX_LABELS_MAGIC, lmagic)
    if ln != n:
        raise CountMismatchError(n, ln)
    if len(lbl_bytes) < 8 + ln:
        raise TruncatedFileError(labels_path, 8 + ln, len(lbl_bytes))
    labels = np.frombuffer(lbl_bytes, dtype=np.uint8, count=ln, offset=8).astype(np.int64)

    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images, labels, num_classes, name)


def load_cifar10_binary(batch_paths: Sequence, name: str = "cifar10") -> Dataset:
    """Load CIFAR-10 binary batch files (RGB channel order)."""
    paths = list(batch_paths)
    if not paths:
        raise DataError("no CIFAR-10 batch files given")
    all_images, all_labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise RecordSizeError(path, len(raw))
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        all_labels.append(records[:, 0].astype(np.int64))
        all_images.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(np.concatenate(all_images), np.concatenate(all_labels), 10, name)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def _class_masks(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """One H x W binary mask per class, amplitude 1.0."""
    hw = spec.image_size
    masks = np.zeros((spec.num_classes, hw, hw), dtype=np.float32)
    if spec.difficulty == "easy":
        # Disjoint horizontal bands: orthogonal supports, trivially separable.
        rows = np.array_split(np.arange(hw), spec.num_classes)
        for c, band in enumerate(rows):
            masks[c, band, :] = 1.0
    else:
        # Shared support: every class lights a random half of a common region,
        # so pixel supports overlap heavily between classes.
        region = np.zeros((hw, hw), dtype=bool)
        region[hw // 4 : 3 * hw // 4, :] = True
        idx = np.flatnonzero(region)
        for c in range(spec.num_classes):
            chosen = rng.choice(idx, size=idx.size // 2, replace=False)
            m = np.zeros(hw * hw, dtype=np.float32)
            m[chosen] = 1.0
            masks[c] = m.reshape(hw, hw)
    return masks


def synthesize(spec: SynthSpec) -> Dataset:
    """Class-balanced noisy-pattern dataset, deterministic in the seed."""
    rng = np.random.default_rng(spec.seed)
    masks = _class_masks(spec, rng)
    sigma = 0.1 if spec.difficulty == "easy" else 0.8
    n = spec.num_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class).astype(np.int64)
    noise = rng.normal(0.0, sigma, size=(n, spec.image_size, spec.image_size)).astype(np.float32)
    images = masks[labels] + noise
    return Dataset(images[:, None, :, :], labels, spec.num_classes,
                   f"synth-{spec.difficulty}-s{spec.seed}")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def split(dataset: Dataset, val_fraction: float, seed: int) -> SplitPair:
    """Seeded permutation partition into train/val."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ValueError(f"val_fraction {val_fraction} leaves no training data for N={n}")
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    return SplitPair(
        train=dataset.subset(np.sort(train_idx), f"{dataset.name}-train"),
        val=dataset.subset(np.sort(val_idx), f"{dataset.name}-val"),
        val_fraction=val_fraction,
        seed=seed,
    )


def channel_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over all pixels (std floored at 1e-6)."""
    mean = dataset.images.mean(axis=(0, 2, 3))
    std = np.maximum(dataset.images.std(axis=(0, 2, 3)), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(dataset: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    if np.any(std <= 0):
        raise ValueError("std must be positive")
    return replace(dataset, images=(dataset.images - mean) / std)


def pad_and_expand(dataset: Dataset, target_hw: int, target_channels: int) -> Dataset:
    """Zero-pad spatially (centered) and replicate channels."""
    n, c, h, w = dataset.images.shape
    if target_hw < h or target_hw < w:
        raise ValueError(f"target size {target_hw} smaller than input {h}x{w}")
    top = (target_hw - h) // 2
    left = (target_hw - w) // 2
    images = np.zeros((n, c, target_hw, target_hw), dtype=np.float32)
    images[:, :, top : top + h, left : left + w] = dataset.images
    if target_channels != c:
        if c != 1:
            raise ValueError(f"cannot expand {c} channels to {target_channels}")
        images = np.repeat(images, target_channels, axis=1)
    return replace(dataset, images=images)


def batches(dataset: Dataset, batch_size: int, shuffle_seed=None,
            epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Mini-batches covering the dataset once; ceil(N / batch_size) of them.

    With ``shuffle_seed`` set, the order is a permutation deterministic in
    (shuffle_seed, epoch); otherwise samples come in stored order.
    ``shuffle_seed`` may be an int or a tuple of ints.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        seed_seq = list(shuffle_seed) if isinstance(shuffle_seed, (tuple, list)) else [int(shuffle_seed)]
        order = np.random.default_rng(seed_seq + [int(epoch)]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def augment_crop_flip(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop (after zero padding) plus horizontal flip, per sample."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    tops = rng.integers(0, 2 * pad + 1, size=n)
    lefts = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    for i in range(n):
        crop = xp[i, :, tops[i] : tops[i] + h, lefts[i] : lefts[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
