"""Synthetic image classification data and its binary container.

Classes are oriented sinusoidal gratings: class c fixes an orientation and a
spatial frequency, each sample draws a random phase and additive Gaussian
noise, and every channel sees a phase-shifted copy of the grating. A linear
probe separates the classes well above chance, so small models can be
compared on convergence behaviour without downloading anything.

File format (".atcv", little-endian): magic "ATCV", version u16, then
M / S / num_classes as u32, M labels as u32, and the float64 image block of
shape [M, 3, S, S] in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

__all__ = ["Dataset", "generate_dataset", "save_dataset", "load_dataset"]

MAGIC = b"ATCV"
VERSION = 1
CHANNEL_MEAN_TOLERANCE = 0.5


@dataclass
class Dataset:
    images: np.ndarray  # [M, 3, S, S] float64
    labels: np.ndarray  # [M] int64, values < num_classes
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise FormatError(f"images must be [M, 3, S, S], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise FormatError(
                f"{self.images.shape[0]} images but {self.labels.shape} labels")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]


def generate_dataset(num_samples: int, image_size: int, num_classes: int,
                     seed: int, noise: float = 0.6, split: str = "train") -> Dataset:
    """Seeded grating dataset; per-channel mean is normalized to zero."""
    rng = np.random.default_rng(seed)
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s] / s
    labels = rng.integers(0, num_classes, size=num_samples)
    images = np.empty((num_samples, 3, s, s))
    for i, c in enumerate(labels):
        theta = np.pi * c / num_classes
        freq = 2.0 + 1.5 * (c % 4)
        ramp = xx * np.cos(theta) + yy * np.sin(theta)
        phase = rng.uniform(0, 2 * np.pi)
        for ch in range(3):
            # random-phase grating plus a fixed-phase copy: the latter keeps
            # the classes visible to a plain linear probe on raw pixels
            angle = 2 * np.pi * freq * ramp + ch * np.pi / 3
            grating = np.sin(angle + phase) + 0.6 * np.sin(angle)
            images[i, ch] = grating + noise * rng.standard_normal((s, s))
    mean = images.mean(axis=(0, 2, 3), keepdims=True)
    std = images.std(axis=(0, 2, 3), keepdims=True)
    images = (images - mean) / std
    return Dataset(images, labels.astype(np.int64), num_classes, split)


def save_dataset(ds: Dataset, path) -> None:
    m, _, s, _ = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<III", m, s, ds.num_classes))
        fh.write(ds.labels.astype("<u4").tobytes())
        fh.write(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())


def load_dataset(path, split: str = "train") -> Dataset:
    """Read and validate an .atcv file; format errors carry the byte offset."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: missing ATCV magic", offset=0)
    if len(blob) < 6:
        raise FormatError(f"{path}: truncated version field", offset=4)
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if len(blob) < 18:
        raise FormatError(f"{path}: truncated header", offset=6)
    m, s, num_classes = struct.unpack_from("<III", blob, 6)
    labels_off = 18
    images_off = labels_off + 4 * m
    expected = images_off + 8 * m * 3 * s * s
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for M={m}, S={s}, got {len(blob)}",
            offset=min(len(blob), images_off))
    labels = np.frombuffer(blob, dtype="<u4", count=m, offset=labels_off)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise FormatError(
            f"{path}: label {labels[bad[0]]} out of range (num_classes={num_classes})",
            offset=labels_off + 4 * int(bad[0]))
    images = np.frombuffer(blob, dtype="<f8", count=m * 3 * s * s,
                           offset=images_off).reshape(m, 3, s, s)
    if m:
        worst = float(np.abs(images.mean(axis=(0, 2, 3))).max())
        if worst > CHANNEL_MEAN_TOLERANCE:
            raise FormatError(
                f"{path}: channel mean {worst:.3f} breaks the normalization "
                f"contract (|mean| <= {CHANNEL_MEAN_TOLERANCE})", offset=images_off)
    return Dataset(images.copy(), labels.astype(np.int64), num_classes, split)
