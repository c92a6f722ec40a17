"""Linear flow-matching schedule: interpolation, velocity targets and
conversions, logit-normal time sampling, SNR, RMS rescaling, and the
SNR-equivalent time shift.

Noised inputs follow z_t = t*clean + (1-t)*noise with unit Gaussian noise.
The model predicts clean targets; velocities are recovered as
(pred - z_t) / max(1-t, clip). Scalar math is float64; array payloads keep
the caller's dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng

DEFAULT_TIME_MU = -0.8
DEFAULT_TIME_SIGMA = 0.8
DEFAULT_ONE_MINUS_T_CLIP = 0.05

# |logit| bound keeping sigmoid strictly inside (0, 1) at float64
_LOGIT_BOUND = 30.0


@dataclass(frozen=True)
class TimeSampler:
    """t = sigmoid(g), g ~ Normal(mu, sigma^2); samples lie strictly in (0,1)."""

    mu: float = DEFAULT_TIME_MU
    sigma: float = DEFAULT_TIME_SIGMA

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass
class NoisedPair:
    """One stream's (clean, noise, t, z_t) with z_t = t*clean + (1-t)*noise."""

    clean: np.ndarray
    noise: np.ndarray
    t: np.ndarray  # scalar or per-sample (B,)
    z_t: np.ndarray


@dataclass(frozen=True)
class Calibration:
    """RMS match between streams: alpha = rms_pixels / rms_features."""

    rms_pixels: float
    rms_features: float

    @property
    def alpha(self) -> float:
        return self.rms_pixels / self.rms_features


def sample_time(rng: Rng, sampler: TimeSampler, n: int) -> np.ndarray:
    """Draw n times from the logit-normal sampler, strictly inside (0,1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = sampler.mu + sampler.sigma * rng.normal((n,), dtype=np.float64)
    g = np.clip(g, -_LOGIT_BOUND, _LOGIT_BOUND)
    return 1.0 / (1.0 + np.exp(-g))


def _t_factors(t, ndim: int, dtype):
    """Broadcastable (t, 1-t) factors for a batch of per-sample times."""
    t = np.asarray(t, dtype=dtype)
    if t.ndim == 1 and ndim > 1:
        t = t.reshape((-1,) + (1,) * (ndim - 1))
    return t, 1.0 - t


def interpolate(clean: np.ndarray, noise: np.ndarray, t) -> NoisedPair:
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {noise.shape}")
    tt, omt = _t_factors(t, clean.ndim, clean.dtype)
    z = tt * clean + omt * noise
    return NoisedPair(clean=clean, noise=noise, t=np.asarray(t), z_t=z)


def velocity_target(clean: np.ndarray, noise: np.ndarray) -> np.ndarray:
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {noise.shape}")
    return clean - noise


def clean_to_velocity(pred_clean, z_t, t, clip: float = DEFAULT_ONE_MINUS_T_CLIP):
    """v = (pred_clean - z_t) / max(1-t, clip).

    Works on plain arrays or autodiff tensors (z_t and t are constants, so
    the conversion is an affine map of the prediction).
    """
    from . import tensor as T

    if isinstance(pred_clean, T.Tensor):
        denom = np.maximum(1.0 - np.asarray(t, dtype=np.float64), clip)
        inv = (1.0 / denom).astype(pred_clean.data.dtype)
        if inv.ndim == 1 and pred_clean.ndim > 1:
            inv = inv.reshape((-1,) + (1,) * (pred_clean.ndim - 1))
        return (pred_clean - np.asarray(z_t)) * inv
    tt = np.asarray(t, dtype=np.float64)
    denom = np.maximum(1.0 - tt, clip).astype(pred_clean.dtype)
    if denom.ndim == 1 and pred_clean.ndim > 1:
        denom = denom.reshape((-1,) + (1,) * (pred_clean.ndim - 1))
    return (pred_clean - z_t) / denom


def snr(t: float, signal_power: float, noise_power: float = 1.0) -> float:
    """t^2 * signal_power / ((1-t)^2 * noise_power)."""
    t = float(t)
    if t <= 0.0 or t >= 1.0:
        raise ValueError("snr defined only for t strictly inside (0, 1)")
    return (t * t * signal_power) / ((1.0 - t) ** 2 * noise_power)


def rescale_alpha(rms_pixels: float, rms_features: float) -> Calibration:
    if rms_pixels <= 0 or rms_features <= 0:
        raise ValueError("degenerate dataset: zero RMS")
    return Calibration(rms_pixels=float(rms_pixels), rms_features=float(rms_features))


def time_shift(alpha: float, t):
    """t' = alpha*t / (1 + (alpha-1)*t); Moebius bijection fixing 0 and 1."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    t = np.asarray(t, dtype=np.float64)
    out = alpha * t / (1.0 + (alpha - 1.0) * t)
    return float(out) if out.ndim == 0 else out


def rms(values: np.ndarray) -> float:
    """Root-mean-square over all elements (dataset-global pooling)."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean(v * v)))
