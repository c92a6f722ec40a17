"""Deterministic synthetic class-conditional image datasets.

Two generators: Blobs (anisotropic Gaussian bump at a class-determined grid
position with per-sample jitter) and Rings (class-determined radius annulus
with jitter). Pixels are min-max rescaled so the dataset exactly spans
[-1, 1]. Samples are interleaved by class (sample i has class i mod C), so
any contiguous slice stays class-balanced.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .rng import Rng
from . import serialization

GENERATOR_IDS = {"blobs": 0, "rings": 1}
_ID_GENERATORS = {v: k for k, v in GENERATOR_IDS.items()}


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 4
    samples_per_class: int = 512
    height: int = 16
    width: int = 16
    channels: int = 1
    seed: int = 7
    generator: str = "blobs"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.generator not in GENERATOR_IDS:
            raise ValueError(f"unknown generator {self.generator!r}")


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    spec: DatasetSpec

    def __len__(self) -> int:
        return self.images.shape[0]


def _class_centers(n_classes: int, h: int, w: int) -> np.ndarray:
    """Class anchor points on a grid, pulled toward the image center so that
    jittered samples from neighboring classes overlap (the conditional task
    must stay hard enough that guidance has signal to amplify)."""
    grid = int(np.ceil(np.sqrt(n_classes)))
    centers = []
    for c in range(n_classes):
        gy, gx = divmod(c, grid)
        cy = (gy + 0.5) / grid * h
        cx = (gx + 0.5) / grid * w
        centers.append((0.7 * cy + 0.3 * h / 2, 0.7 * cx + 0.3 * w / 2))
    return np.array(centers)


def _blob_image(rng: Rng, center, h: int, w: int) -> np.ndarray:
    cy = center[0] + float(rng.uniform(()) * 6.0 - 3.0)
    cx = center[1] + float(rng.uniform(()) * 6.0 - 3.0)
    sy = 0.7 + 1.4 * float(rng.uniform(()))
    sx = 0.7 + 1.4 * float(rng.uniform(()))
    amp = 0.55 + 0.45 * float(rng.uniform(()))
    yy, xx = np.mgrid[0:h, 0:w]
    return amp * np.exp(-((yy - cy) ** 2 / (2 * sy ** 2)
                          + (xx - cx) ** 2 / (2 * sx ** 2)))


def _ring_image(rng: Rng, radius: float, h: int, w: int) -> np.ndarray:
    cy = h / 2 + float(rng.uniform(()) * 2.0 - 1.0)
    cx = w / 2 + float(rng.uniform(()) * 2.0 - 1.0)
    r = radius + float(rng.uniform(()) - 0.5)
    width = 0.7 + 0.4 * float(rng.uniform(()))
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.exp(-((dist - r) ** 2) / (2 * width ** 2))


def minmax_rescale(raw: np.ndarray):
    """Affine map sending dataset min to -1 and max to +1.

    Returns (rescaled f32 array, (lo, hi)) so the map can be inverted.
    """
    lo = float(raw.min())
    hi = float(raw.max())
    if hi <= lo:
        raise ValueError("constant dataset cannot be min-max rescaled")
    out = (raw.astype(np.float64) - lo) / (hi - lo) * 2.0 - 1.0
    return out.astype(np.float32), (lo, hi)


def generate(spec: DatasetSpec) -> Dataset:
    rng = Rng(spec.seed).child("dataset")
    n = spec.n_classes * spec.samples_per_class
    h, w, c = spec.height, spec.width, spec.channels
    centers = _class_centers(spec.n_classes, h, w)
    radii = np.linspace(2.0, min(h, w) / 2 - 1.5, spec.n_classes)

    raw = np.empty((n, c, h, w), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = i % spec.n_classes
        labels[i] = cls
        r = rng.child(f"sample{i}")
        if spec.generator == "blobs":
            img = _blob_image(r, centers[cls], h, w)
        else:
            img = _ring_image(r, float(radii[cls]), h, w)
        raw[i] = img[None, :, :] if c == 1 else np.repeat(img[None], c, axis=0)

    images, _ = minmax_rescale(raw)
    return Dataset(images=images, labels=labels, spec=spec)


def save(dataset: Dataset, path) -> None:
    serialization.write_dataset(
        path, dataset.images, dataset.labels,
        dataset.spec.n_classes, dataset.spec.samples_per_class,
        dataset.spec.seed, GENERATOR_IDS[dataset.spec.generator])


def load(path) -> Dataset:
    images, labels, header = serialization.read_dataset(path)
    spec = DatasetSpec(
        n_classes=header["n_classes"], samples_per_class=header["samples_per_class"],
        height=header["height"], width=header["width"], channels=header["channels"],
        seed=header["seed"], generator=_ID_GENERATORS[header["generator_id"]])
    return Dataset(images=images, labels=labels, spec=spec)


def batches(dataset: Dataset, batch_size: int, rng: Rng | None,
            shuffle: bool = True, limit: int | None = None,
            ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of (images, labels) batches; the last partial batch is
    dropped so same-class neighbor statistics stay stable."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    n = len(dataset) if limit is None else min(limit, len(dataset))
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
