"""Heun ODE sampling of the joint velocity field from noise (t=0) to data
(t=1), with per-stream classifier-free guidance.

The model predicts clean targets; velocities derive from the clean
prediction with the (1-t) clip at every solver call, matching the training
parameterization. Guidance combines a conditional pass with an
unconditional pass built per the configured unconditional type: the mask
types keep BOTH noisy streams as inputs and only null the class while
blocking cross-stream attention, while zero/null-token types replace the
semantic input. Both streams integrate on the same time grid; when
calibration is realized as a schedule shift, the semantic stream queries
the model at the shifted time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import schedule
from .rng import Rng
from .tensor import no_grad, single_thread_blas

UNCOND_TYPES = ("zero_semantic", "null_token", "bidirectional_mask",
                "semantic_to_pixel_mask", "class_only")


class DivergenceError(RuntimeError):
    """Non-finite state encountered during integration."""


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 1.0
    cfg_interval: tuple[float, float] | None = None  # None = full range
    uncond_type: str = "semantic_to_pixel_mask"
    clip: float = schedule.DEFAULT_ONE_MINUS_T_CLIP
    time_shift_alpha: float | None = None  # semantic stream queries t'(alpha, t)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.uncond_type not in UNCOND_TYPES:
            raise ValueError(f"unknown uncond_type {self.uncond_type!r}")
        if self.cfg_interval is not None:
            lo, hi = self.cfg_interval
            if not (0 <= lo < hi <= 1):
                raise ValueError("cfg_interval must satisfy 0 <= lo < hi <= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be non-negative")


@dataclass
class GuidedVelocity:
    v_x: np.ndarray
    v_d: np.ndarray | None
    v_x_cond: np.ndarray | None = None
    v_x_uncond: np.ndarray | None = None
    v_d_cond: np.ndarray | None = None
    v_d_uncond: np.ndarray | None = None


def guidance_combine(v_cond: np.ndarray, v_uncond: np.ndarray, s: float) -> np.ndarray:
    """uncond + s * (cond - uncond)."""
    if v_cond.shape != v_uncond.shape:
        raise ValueError("guidance operands must have equal shapes")
    return v_uncond + s * (v_cond - v_uncond)


def _uncond_conditioning(cfg: SamplerConfig, b: int, t_pixel, t_semantic) -> M.Conditioning:
    mask = np.zeros(b, dtype=np.int64)
    sem = np.zeros(b, dtype=np.int64)
    if cfg.uncond_type == "semantic_to_pixel_mask":
        mask[:] = M.MASK_SEMANTIC_TO_PIXEL
    elif cfg.uncond_type == "bidirectional_mask":
        mask[:] = M.MASK_BIDIRECTIONAL
    elif cfg.uncond_type == "zero_semantic":
        sem[:] = M.SEM_ZERO
    elif cfg.uncond_type == "null_token":
        sem[:] = M.SEM_NULL_TOKEN
    # class_only: only the label is nulled
    return M.Conditioning(t_pixel=t_pixel,
                          class_ids=np.full(b, M.NULL_CLASS, dtype=np.int64),
                          t_semantic=t_semantic, mask_types=mask,
                          semantic_modes=sem)


def predict_velocity(model_cfg: M.ModelConfig, params: dict, z_x: np.ndarray,
                     z_d: np.ndarray | None, t: float, class_ids: np.ndarray,
                     cfg: SamplerConfig) -> GuidedVelocity:
    """Guided joint velocity at time t.

    Guidance applies per stream only when t lies inside cfg_interval (or
    always, when no interval is set); s=1 elides the unconditional pass.
    """
    b = z_x.shape[0]
    t_pix = np.full(b, t)
    t_sem = (t_pix if cfg.time_shift_alpha is None
             else np.full(b, schedule.time_shift(cfg.time_shift_alpha, t)))

    def to_velocity(out: M.ForwardOutput):
        vx = schedule.clean_to_velocity(out.pred_pixels.data, z_x, t_pix, cfg.clip)
        vd = None
        if out.pred_semantics is not None:
            vd = schedule.clean_to_velocity(out.pred_semantics.data, z_d, t_sem, cfg.clip)
        return vx, vd

    with no_grad():
        cond = M.Conditioning(t_pixel=t_pix, class_ids=class_ids, t_semantic=t_sem)
        vx_c, vd_c = to_velocity(M.forward(model_cfg, params, z_x, z_d, cond))

        in_interval = (cfg.cfg_interval is None or
                       cfg.cfg_interval[0] <= t <= cfg.cfg_interval[1])
        if cfg.cfg_scale == 1.0 or not in_interval:
            return GuidedVelocity(v_x=vx_c, v_d=vd_c, v_x_cond=vx_c, v_d_cond=vd_c)

        ucond = _uncond_conditioning(cfg, b, t_pix, t_sem)
        if not model_cfg.has_semantic:
            ucond.mask_types[:] = M.MASK_NONE
            ucond.semantic_modes[:] = M.SEM_FEATURES
        vx_u, vd_u = to_velocity(M.forward(model_cfg, params, z_x, z_d, ucond))

    s = cfg.cfg_scale
    v_x = guidance_combine(vx_c, vx_u, s)
    v_d = guidance_combine(vd_c, vd_u, s) if vd_c is not None else None
    return GuidedVelocity(v_x=v_x, v_d=v_d, v_x_cond=vx_c, v_x_uncond=vx_u,
                          v_d_cond=vd_c, v_d_uncond=vd_u)


def heun_path(field, state: tuple[np.ndarray, ...], grid: np.ndarray,
              ) -> tuple[np.ndarray, ...]:
    """Heun (explicit trapezoidal) integration of a tuple-valued field over
    a fixed time grid; the step landing exactly on t=1 uses plain Euler.

    field(state, t) -> tuple of arrays matching state.
    """
    state = tuple(np.asarray(s).copy() for s in state)
    for k in range(len(grid) - 1):
        t0, t1 = float(grid[k]), float(grid[k + 1])
        h = t1 - t0
        v0 = field(state, t0)
        if t1 >= 1.0:
            state = tuple(s + h * v for s, v in zip(state, v0))
        else:
            pred = tuple(s + h * v for s, v in zip(state, v0))
            v1 = field(pred, t1)
            state = tuple(s + 0.5 * h * (a + b)
                          for s, a, b in zip(state, v0, v1))
        for s in state:
            if not np.all(np.isfinite(s)):
                raise DivergenceError(
                    f"non-finite state at t={t1:.4f} (step {k + 1}/{len(grid) - 1})")
    return state


def heun_integrate(model_cfg: M.ModelConfig, params: dict, rng: Rng,
                   class_ids: np.ndarray, cfg: SamplerConfig,
                   ) -> tuple[np.ndarray, np.ndarray | None]:
    """Generate images (and terminal semantic features) from Gaussian noise.

    Both streams share one linear grid over [0, 1].
    """
    b = len(class_ids)
    c = model_cfg.image_channels
    z_x = rng.child("noise_x").normal((b, c, model_cfg.image_height,
                                       model_cfg.image_width))
    z_d = (rng.child("noise_d").normal((b, model_cfg.n_tokens, model_cfg.feature_dim))
           if model_cfg.has_semantic else None)
    grid = np.linspace(0.0, 1.0, cfg.steps + 1)

    if model_cfg.has_semantic:
        def field(state, t):
            gx, gd = state
            v = predict_velocity(model_cfg, params, gx.astype(np.float32),
                                 gd.astype(np.float32), t, class_ids, cfg)
            return v.v_x, v.v_d

        out_x, out_d = heun_path(field, (z_x, z_d), grid)
        return out_x.astype(np.float32), out_d.astype(np.float32)

    def field(state, t):
        v = predict_velocity(model_cfg, params, state[0].astype(np.float32),
                             None, t, class_ids, cfg)
        return (v.v_x,)

    (out_x,) = heun_path(field, (z_x,), grid)
    return out_x.astype(np.float32), None


def sample_many(model_cfg: M.ModelConfig, params: dict, cfg: SamplerConfig,
                class_ids: np.ndarray, seed: int, threads: int = 1,
                shard_size: int = 64) -> tuple[np.ndarray, np.ndarray | None]:
    """Generate a large sample set in fixed-size shards.

    Each shard draws from its own named substream and shards are
    concatenated in order, so the output is bitwise independent of the
    worker count.
    """
    class_ids = np.asarray(class_ids, dtype=np.int64)
    shards = [class_ids[s:s + shard_size]
              for s in range(0, len(class_ids), shard_size)]
    root = Rng(seed)

    def run(k: int):
        with single_thread_blas():
            return heun_integrate(model_cfg, params, root.child(f"shard{k}"),
                                  shards[k], cfg)

    if threads > 1 and len(shards) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(len(shards))))
    else:
        results = [run(k) for k in range(len(shards))]

    images = np.concatenate([r[0] for r in results])
    feats = (np.concatenate([r[1] for r in results])
             if results[0][1] is not None else None)
    return images, feats
