"""Datasets: synthetic oriented gratings and CIFAR-format binary files.

The synthetic task is class-conditional gratings: class k gets orientation
pi * k / num_classes, each example draws a random phase, channels carry the
same pattern at decreasing amplitude, and Gaussian pixel noise controls the
difficulty. Everything is reproducible from the dataset seed alone, so the
same data can be reused across many training seeds.

The binary format matches the common CIFAR-10 layout: 3073-byte records of
one label byte followed by 3072 bytes of channel-major (R, G, B) 32x32
planes. Loaded pixels are scaled to [0, 1] and standardized per channel
with statistics of the loaded subset.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .tensor import seeded_generator

__all__ = [
    "Dataset",
    "DatasetSpec",
    "synth_dataset",
    "load_cifar_binary",
    "write_cifar_binary",
    "load_dataset",
]

RECORD_BYTES = 3073
CIFAR_HW = 32
CIFAR_CHANNELS = 3


@dataclass(frozen=True)
class Dataset:
    """Images (N, C, H, W) float64 plus integer labels (N,)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"inconsistent dataset shapes {self.images.shape}, {self.labels.shape}")

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, start: int, count: int) -> "Dataset":
        if start < 0 or count < 0 or start + count > len(self):
            raise ValueError(f"slice [{start}, {start + count}) out of range for {len(self)} examples")
        return Dataset(self.images[start : start + count], self.labels[start : start + count],
                       self.num_classes)


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from and how it is split.

    source "synthetic" generates gratings from (seed, counts, noise);
    source "cifar-binary" reads train_count + eval_count records from path.
    The dataset seed is independent of the training seed so one dataset can
    serve several training runs.
    """

    source: str = "synthetic"
    path: str | None = None
    train_count: int = 2000
    eval_count: int = 512
    num_classes: int = 10
    image_hw: int = 32
    channels: int = 3
    noise: float = 1.0
    seed: int = 1234

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar-binary"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.source == "cifar-binary":
            if not self.path:
                raise ValueError("cifar-binary source needs a path")
            if self.image_hw != CIFAR_HW or self.channels != CIFAR_CHANNELS:
                raise ValueError("cifar-binary records are fixed at 3x32x32")
        if self.train_count < 1 or self.eval_count < 1:
            raise ValueError("train_count and eval_count must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def _channel_amplitudes(channels: int) -> np.ndarray:
    if channels == 1:
        return np.array([1.0])
    return 1.0 - 0.4 * np.arange(channels) / (channels - 1)


def synth_dataset(count: int, num_classes: int, image_hw: int = 32, channels: int = 3,
                  noise: float = 1.0, seed: int = 1234) -> Dataset:
    """Oriented-grating classification set, fully determined by the seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = seeded_generator(seed, "synth")
    labels = np.arange(count, dtype=np.int64) % num_classes
    angles = np.pi * labels / num_classes
    phases = rng.uniform(0.0, 2.0 * np.pi, count)
    u = np.arange(image_hw) / image_hw
    proj = (np.cos(angles)[:, None, None] * u[None, None, :]
            + np.sin(angles)[:, None, None] * u[None, :, None])
    base = np.cos(2.0 * np.pi * 3.0 * proj + phases[:, None, None])
    images = base[:, None, :, :] * _channel_amplitudes(channels)[None, :, None, None]
    if noise > 0:
        images = images + noise * rng.standard_normal(images.shape)
    return Dataset(np.ascontiguousarray(images), labels, num_classes)


def _standardize(images: np.ndarray) -> np.ndarray:
    mean = images.mean(axis=(0, 2, 3), keepdims=True)
    std = images.std(axis=(0, 2, 3), keepdims=True)
    return (images - mean) / np.maximum(std, 1e-12)


def load_cifar_binary(path, count: int, num_classes: int = 10) -> Dataset:
    """Reads the first `count` records and standardizes over that subset."""
    size = os.path.getsize(path)
    if size % RECORD_BYTES:
        raise ValueError(f"{path}: size {size} is not a multiple of {RECORD_BYTES}-byte records")
    available = size // RECORD_BYTES
    if count < 1 or count > available:
        raise ValueError(f"requested {count} records, file holds {available}")
    with open(path, "rb") as f:
        raw = np.frombuffer(f.read(count * RECORD_BYTES), dtype=np.uint8)
    records = raw.reshape(count, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} out of range for {num_classes} classes")
    pixels = records[:, 1:].reshape(count, CIFAR_CHANNELS, CIFAR_HW, CIFAR_HW)
    images = _standardize(pixels.astype(np.float64) / 255.0)
    return Dataset(images, labels, num_classes)


def write_cifar_binary(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Writes uint8 images (N, 3, 32, 32) and labels in the 3073-byte format."""
    if images.dtype != np.uint8 or images.shape[1:] != (CIFAR_CHANNELS, CIFAR_HW, CIFAR_HW):
        raise ValueError(f"need uint8 (N,3,32,32) images, got {images.dtype} {images.shape}")
    n = images.shape[0]
    if labels.shape != (n,):
        raise ValueError("labels must match image count")
    records = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images.reshape(n, -1)
    with open(path, "wb") as f:
        f.write(records.tobytes())


def load_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Materializes (train split, eval split) for a DatasetSpec."""
    total = spec.train_count + spec.eval_count
    if spec.source == "synthetic":
        full = synth_dataset(total, spec.num_classes, spec.image_hw, spec.channels,
                             spec.noise, spec.seed)
    else:
        full = load_cifar_binary(spec.path, total, spec.num_classes)
    return full.take(0, spec.train_count), full.take(spec.train_count, spec.eval_count)
