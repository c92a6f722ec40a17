"""Generation-quality metrics in the frozen-teacher feature space.

The Fréchet distance between Gaussian fits of per-image features stands in
for large-scale feature-space metrics at desk scale. The covariance square
roots come from a cyclic Jacobi eigensolver with negative eigenvalues
clamped to zero (floating-point products can be slightly indefinite).

Per-image features are mean-pooled normalized teacher features, so the
statistics live in a small (feature_dim) space that a few hundred samples
estimate well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import teacher as TE

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100


@dataclass(frozen=True)
class FrechetStats:
    mean: np.ndarray  # (F,)
    cov: np.ndarray   # (F, F), 1/(n-1) normalization


def eigensolve_sym(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations for a symmetric matrix.

    Sweeps until the off-diagonal Frobenius norm falls below
    JACOBI_TOL * ||A||_F. Returns (eigenvalues, eigenvectors as columns)
    with A == V diag(w) V^T up to float tolerance.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-8 * max(1.0, np.abs(a).max())):
        raise ValueError("input must be a symmetric square matrix")
    m = a.copy()
    v = np.eye(n)
    norm_a = np.linalg.norm(a)
    if norm_a == 0.0:
        return np.zeros(n), v

    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(max(0.0, np.sum(m ** 2) - np.sum(np.diag(m) ** 2)))
        if off < JACOBI_TOL * norm_a:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if m[p, q] == 0.0:
                    continue
                # rotation angle zeroing m[p, q]
                theta = (m[q, q] - m[p, p]) / (2.0 * m[p, q])
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:  # theta^2 would overflow; use the limit
                    t = 1.0 / (2.0 * theta)
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                m = rot.T @ m @ rot
                v = v @ rot
    return np.diag(m).copy(), v


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues clamp to zero."""
    w, v = eigensolve_sym(a)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_stats(features: np.ndarray) -> FrechetStats:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("need a (n, F) feature matrix with n >= 2")
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / (feats.shape[0] - 1)
    return FrechetStats(mean=mean, cov=cov)


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mean.shape != b.mean.shape:
        raise ValueError("feature dimensions disagree")
    diff = a.mean - b.mean
    root_a = sqrtm_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    cross = sqrtm_psd(0.5 * (inner + inner.T))
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov)
                 - 2.0 * np.trace(cross))


def pooled_features(images: np.ndarray, encoder: TE.TeacherEncoder,
                    stats: TE.FeatureStats) -> np.ndarray:
    """Per-image feature vector: normalized teacher features averaged over
    patch tokens."""
    feats = TE.normalize(encoder.encode(images), stats)
    return feats.mean(axis=1).astype(np.float64)


def toy_fd(generated: np.ndarray, real: np.ndarray,
           encoder: TE.TeacherEncoder, stats: TE.FeatureStats) -> float:
    return frechet_distance(frechet_stats(pooled_features(generated, encoder, stats)),
                            frechet_stats(pooled_features(real, encoder, stats)))


def class_mean_error(gen_images: np.ndarray, gen_labels: np.ndarray,
                     real_images: np.ndarray, real_labels: np.ndarray) -> float:
    """Average L2 distance between per-class pixel-mean images."""
    classes = np.unique(real_labels)
    errs = []
    for c in classes:
        gm = gen_images[gen_labels == c].mean(axis=0)
        rm = real_images[real_labels == c].mean(axis=0)
        errs.append(float(np.linalg.norm(gm - rm)))
    return float(np.mean(errs))


def evaluate_samples(gen_images: np.ndarray, gen_labels: np.ndarray,
                     real_images: np.ndarray, real_labels: np.ndarray,
                     encoder: TE.TeacherEncoder, stats: TE.FeatureStats,
                     min_count: int = 64) -> dict:
    if gen_images.shape[0] < min_count or real_images.shape[0] < min_count:
        raise ValueError(f"need at least {min_count} generated and real samples")
    return {
        "toy_fd": toy_fd(gen_images, real_images, encoder, stats),
        "class_mean_err": class_mean_error(gen_images, gen_labels,
                                           real_images, real_labels),
    }
