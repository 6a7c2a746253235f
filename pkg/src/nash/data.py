"""Dataset ingestion: the public CIFAR-10 binary layout plus a synthetic
oriented-bar generator that keeps end-to-end runs fast."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidArgumentError

RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 pixel bytes


@dataclass
class Dataset:
    """Images as float32 NCHW in [0, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InvalidArgumentError("images must be NCHW")
        if len(self.labels) != len(self.images):
            raise InvalidArgumentError("labels and images disagree on N")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise InvalidArgumentError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


def parse_cifar10_bin(path: str) -> Dataset:
    """Decode one CIFAR-10 binary batch file.

    Each 3073-byte record is one label byte followed by a 32x32 red
    plane, then green, then blue, row-major. Pixels map to [0, 1] via
    /255 and nothing else.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: length {raw.size} is not a positive multiple of "
            f"{RECORD_BYTES}; trailing {raw.size % RECORD_BYTES} bytes at "
            f"offset {raw.size - raw.size % RECORD_BYTES}")
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(
            f"{path}: label {labels[bad[0]]} > 9 in record {bad[0]} "
            f"(offset {bad[0] * RECORD_BYTES})")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, 10)


def load_cifar10_files(paths: list[str]) -> Dataset:
    parts = [parse_cifar10_bin(p) for p in paths]
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), 10)


def synth_dataset(classes: int, n_per_class: int, hw: int, seed: int,
                  sigma: float = 0.1, channels: int = 3) -> Dataset:
    """Class-conditional oriented bars with additive Gaussian noise.

    Class k draws a bar through the image center at angle k*pi/classes,
    identical across channels, then adds N(0, sigma^2) noise and clips
    to [0, 1]. With sigma=0 all samples of a class are identical.
    """
    if classes < 2 or n_per_class < 1 or hw < 4:
        raise InvalidArgumentError("need classes >= 2, n_per_class >= 1, hw >= 4")
    rng = np.random.default_rng(seed)
    cy = cx = (hw - 1) / 2.0
    yy, xx = np.mgrid[0:hw, 0:hw]
    thickness = max(1.0, hw / 12.0)

    templates = []
    for k in range(classes):
        theta = np.pi * k / classes
        dist = np.abs(-np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy))
        templates.append((dist <= thickness).astype(np.float32))

    images = np.zeros((classes * n_per_class, channels, hw, hw), dtype=np.float32)
    labels = np.zeros(classes * n_per_class, dtype=np.int64)
    i = 0
    for k in range(classes):
        for _ in range(n_per_class):
            img = np.broadcast_to(templates[k], (channels, hw, hw)).copy()
            if sigma > 0:
                img += rng.normal(0.0, sigma, img.shape).astype(np.float32)
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = k
            i += 1
    # deterministic shuffle so class blocks do not line up with batches
    perm = rng.permutation(len(labels))
    return Dataset(images[perm], labels[perm], classes)
