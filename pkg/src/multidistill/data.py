"""Synthetic image corpora and the dataset container shared by cache, trainer and probes."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyInputError


@dataclass
class ImageDataset:
    """Images in ``[0, 1]`` with shape ``N x 3 x H x W`` (float32) and ascending int64 ids."""

    ids: np.ndarray
    images: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        if len(self.ids) == 0:
            raise EmptyInputError("dataset is empty")
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ConfigError(f"images must be N x 3 x H x W, got {self.images.shape}")
        if len(self.ids) != len(self.images):
            raise ConfigError("ids and images differ in length")
        if np.any(np.diff(self.ids) <= 0):
            raise ConfigError("dataset ids must be strictly ascending")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, positions) -> "ImageDataset":
        positions = np.sort(np.asarray(positions))
        return ImageDataset(self.ids[positions], self.images[positions])

    def fingerprint(self) -> str:
        """sha256 over the ordered ids and a content hash of every sample."""
        h = hashlib.sha256()
        h.update(self.ids.astype("<i8").tobytes())
        for img in self.images:
            h.update(hashlib.sha256(img.astype("<f4").tobytes()).digest())
        return h.hexdigest()

    def channel_stats(self) -> tuple[list[float], list[float]]:
        x = self.images.astype(np.float64)
        return x.mean(axis=(0, 2, 3)).tolist(), x.std(axis=(0, 2, 3)).tolist()


def square_side(image_size: int) -> int:
    return max(2, image_size // 5)


def render_scenes(n: int, image_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Bright squares on textured noise. Returns ``(images, centers)``.

    ``centers`` holds the square centre as ``(x, y)`` in ``[0, 1]`` image
    coordinates (x = column).
    """
    s = square_side(image_size)
    span = image_size - s
    # smooth colored texture: coarse noise upsampled, plus fine grain
    coarse = rng.uniform(0.0, 0.5, size=(n, 3, 4, 4))
    reps = -(-image_size // 4)
    tex = np.repeat(np.repeat(coarse, reps, axis=2), reps, axis=3)[:, :, :image_size, :image_size]
    images = tex + rng.normal(0.0, 0.05, size=(n, 3, image_size, image_size))
    x0 = rng.integers(0, span + 1, size=n)
    y0 = rng.integers(0, span + 1, size=n)
    colors = rng.uniform(0.8, 1.0, size=(n, 3))
    for i in range(n):
        images[i, :, y0[i] : y0[i] + s, x0[i] : x0[i] + s] = colors[i][:, None, None]
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    centers = np.stack([(x0 + s / 2) / image_size, (y0 + s / 2) / image_size], axis=1)
    return images, centers


def make_corpus(n: int, image_size: int, seed: int) -> ImageDataset:
    """Unlabeled scene corpus used for distillation."""
    if n < 1:
        raise ConfigError(f"corpus size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    images, _ = render_scenes(n, image_size, rng)
    return ImageDataset(np.arange(n, dtype=np.int64), images)
