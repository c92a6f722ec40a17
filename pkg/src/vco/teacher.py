"""Frozen, seeded toy encoder producing patch-level semantic features.

Each image patch is flattened and mapped through a fixed bias-free linear
layer followed by tanh. The weights are drawn once from Normal(0, 1/fan_in)
at construction and never change: gradients may flow THROUGH the encoder
(perceptual and field losses differentiate the predicted image), but never
INTO its weights.

Feature statistics are pooled over all patch positions of the calibration
set, and the semantic stream fed to the diffusion process is
d' = alpha * (phi(x) - mean) / std, with alpha matching the pixel RMS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import schedule, tensor as T
from .rng import Rng

STD_FLOOR = 1e-6


class TeacherEncoder:
    """Per-patch linear + tanh with immutable seeded weights."""

    def __init__(self, patch_size: int = 4, in_channels: int = 1,
                 feature_dim: int = 8, seed: int = 1234):
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.feature_dim = feature_dim
        self.seed = seed
        fan_in = in_channels * patch_size * patch_size
        w = Rng(seed).child("teacher").normal((fan_in, feature_dim))
        self.weights = (w / np.sqrt(fan_in)).astype(np.float32)
        self.weights.setflags(write=False)

    def token_count(self, height: int, width: int) -> int:
        self._check_divisible(height, width)
        return (height // self.patch_size) * (width // self.patch_size)

    def _check_divisible(self, height: int, width: int):
        p = self.patch_size
        if height % p or width % p:
            raise ValueError(f"image {height}x{width} not divisible by patch {p}")

    def _patchify(self, images):
        """(B, C, H, W) -> (B, n, C*p*p); works on arrays and tensors."""
        is_tensor = isinstance(images, T.Tensor)
        shape = images.shape
        b, c, h, w = shape
        self._check_divisible(h, w)
        p = self.patch_size
        gh, gw = h // p, w // p
        x = images if is_tensor else T.Tensor._from_op(np.asarray(images), None)
        x = x.reshape(b, c, gh, p, gw, p)
        x = x.transpose((0, 2, 4, 1, 3, 5))
        return x.reshape(b, gh * gw, c * p * p)

    def encode(self, images):
        """(B, C, H, W) -> (B, n, feature_dim). Accepts a Tensor (gradients
        flow through to the image) or a plain array (returns an array)."""
        is_tensor = isinstance(images, T.Tensor)
        tokens = self._patchify(images)
        w = T.Tensor._from_op(self.weights, None)  # constant, never trainable
        feats = T.tanh(T.matmul(tokens, w))
        return feats if is_tensor else feats.data

@dataclass(frozen=True)
class FeatureStats:
    """Per-dimension mean/std pooled over all patches of the fitting set."""

    mean: np.ndarray  # (feature_dim,)
    std: np.ndarray   # (feature_dim,) floored at STD_FLOOR


def fit_stats(encoder: TeacherEncoder, images: np.ndarray,
              batch: int = 512) -> FeatureStats:
    if images.shape[0] == 0:
        raise ValueError("empty dataset")
    chunks = [encoder.encode(images[s:s + batch]).astype(np.float64)
              for s in range(0, images.shape[0], batch)]
    flat = np.concatenate(chunks).reshape(-1, encoder.feature_dim)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    return FeatureStats(mean=mean.astype(np.float32), std=std.astype(np.float32))


def normalize(feats, stats: FeatureStats):
    """(phi(x) - mean) / std; array or Tensor."""
    inv = (1.0 / stats.std).astype(np.float32)
    if isinstance(feats, T.Tensor):
        return (feats - stats.mean) * inv
    return ((feats - stats.mean) * inv).astype(feats.dtype)


def denormalize(feats: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return feats * stats.std + stats.mean


def fit_calibration(encoder: TeacherEncoder, images: np.ndarray,
                    stats: FeatureStats) -> schedule.Calibration:
    """alpha matching the normalized-feature RMS to the pixel RMS."""
    feats = encoder.encode(images)
    normed = normalize(feats, stats)
    return schedule.rescale_alpha(schedule.rms(images), schedule.rms(normed))


def prepare_semantics(encoder: TeacherEncoder, stats: FeatureStats,
                      calibration: schedule.Calibration | None,
                      images: np.ndarray) -> np.ndarray:
    """Clean semantic targets: alpha * (phi(x) - mean) / std.

    With calibration None the features stay in the normalized space
    (alpha = 1), which is the uncalibrated ablation.
    """
    normed = normalize(encoder.encode(images), stats)
    if calibration is None:
        return normed
    return (normed * np.float32(calibration.alpha)).astype(np.float32)
