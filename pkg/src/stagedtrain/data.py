"""Datasets: CIFAR-10 binary ingestion and the synthetic shortcut benchmark."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import IoFailure, MalformedFile

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


@dataclass
class ImageDataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be [N,C,H,W] with one label per image")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[indices], labels=self.labels[indices])

    def with_images(self, images) -> "ImageDataset":
        return replace(self, images=images)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def load_cifar10_binary(*paths, split: str = "train", limit: int | None = None) -> ImageDataset:
    """Read one or more CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes each)."""
    chunks = []
    for path in paths:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}") from exc
        if len(raw) % CIFAR_RECORD:
            raise MalformedFile(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    rec = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    if limit is not None:
        rec = rec[:limit]
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() >= 10:
        raise MalformedFile(f"label byte {labels.max()} out of range for CIFAR-10")
    images = rec[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float32) / 255.0
    return ImageDataset(images, labels, 10, split)


def write_cifar10_binary(dataset: ImageDataset, path) -> Path:
    """Write ``dataset`` in the 3073-byte record layout (pixels rounded to bytes)."""
    if dataset.image_shape != CIFAR_SHAPE:
        raise ValueError(f"CIFAR layout needs images of shape {CIFAR_SHAPE}, got {dataset.image_shape}")
    if dataset.num_classes > 256:
        raise ValueError("label must fit in one byte")
    pix = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pix], axis=1)
    path = Path(path)
    try:
        path.write_bytes(rec.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return path


def write_image_records(dataset: ImageDataset, path) -> Path:
    """Same record idea for arbitrary shapes: 1 label byte + C*H*W pixel bytes."""
    pix = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pix], axis=1)
    Path(path).write_bytes(rec.tobytes())
    return Path(path)


def read_image_records(path, image_shape, num_classes: int, split: str = "train") -> ImageDataset:
    size = 1 + int(np.prod(image_shape))
    raw = Path(path).read_bytes()
    if len(raw) % size:
        raise MalformedFile(f"{path}: length {len(raw)} is not a multiple of {size}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, size)
    images = rec[:, 1:].reshape(-1, *image_shape).astype(np.float32) / 255.0
    return ImageDataset(images, rec[:, 0].astype(np.int64), num_classes, split)


def _render(k: int, n: int, size: int, channels: int, difficulty: float, rng) -> np.ndarray:
    """Per class an oriented sinusoidal grating; orientation carries the label.

    Each sample also gets a random-orientation distractor grating whose
    amplitude grows with ``difficulty``, so the label signal needs many epochs
    to pick out. Phase, amplitude, background level, colour tint and pixel
    noise vary per sample and everything is smooth and achromatic, so the
    label survives blur, colour jitter and grayscale.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    period = 0.3  # fraction of the image width; smooth at any resolution
    distract = 0.4 * difficulty
    noise = 0.06 * difficulty
    images = np.empty((k * n, channels, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(k), n)
    for idx, c in enumerate(labels):
        img = rng.uniform(0.3, 0.7) + rng.normal(0, 0.05, size=(channels, 1, 1))
        img = np.broadcast_to(img, (channels, size, size)).copy()
        # orientations spread over [0, pi/2] so horizontal flips never swap classes
        theta = 0.5 * np.pi * c / (k - 1) + rng.uniform(-0.1, 0.1)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        img += rng.uniform(0.08, 0.15) * np.sin(2 * np.pi * u / period + rng.uniform(0, 2 * np.pi))
        if distract > 0:
            theta = rng.uniform(0, np.pi)
            wave = rng.uniform(0.15, 0.5)
            u = xx * np.cos(theta) + yy * np.sin(theta)
            img += distract * np.sin(2 * np.pi * u / wave + rng.uniform(0, 2 * np.pi))
        img += rng.normal(0, noise, size=img.shape)
        images[idx] = np.clip(img, 0, 1)
    return images, labels


def synth_shortcut_dataset(
    k: int = 4,
    n_per_class: int = 500,
    size: int = 28,
    difficulty: float = 0.5,
    seed: int = 0,
    n_test_per_class: int | None = None,
    channels: int = 3,
):
    """Synthetic stand-in for CIFAR; returns ``(train, test)``.

    Train and test share the class templates but not samples. ``difficulty``
    in [0, 1] scales the distractor amplitude and pixel noise.
    """
    if k < 2:
        raise ValueError("need at least two classes")
    if not 0 <= difficulty <= 1:
        raise ValueError("difficulty must lie in [0, 1]")
    n_test = n_per_class // 2 if n_test_per_class is None else n_test_per_class
    root = np.random.SeedSequence(seed)
    train_rng, test_rng = (np.random.default_rng(s) for s in root.spawn(2))
    tr_x, tr_y = _render(k, n_per_class, size, channels, difficulty, train_rng)
    te_x, te_y = _render(k, n_test, size, channels, difficulty, test_rng)
    return ImageDataset(tr_x, tr_y, k, "train"), ImageDataset(te_x, te_y, k, "test")
