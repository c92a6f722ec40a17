"""Training loop: Adam with linear warmup into a constant rate, EMA shadow
weights at several decays, conditioning dropout for guidance training, loss
assembly, metrics logging, and bit-exact checkpointing.

Reproducibility contract: every random draw of step k comes from the
substream (seed, "step{k}"), and epoch shuffles from (seed, "epoch{e}"), so
save/reload at any step continues bitwise identically to an uninterrupted
single-threaded run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import model as M
from . import schedule, serialization, structconf, teacher as TE
from . import tensor as T
from .rng import Rng
from .tensor import Tensor

CALIBRATION_MODES = ("rms_scale", "time_shift", "none")
LOSS_NAMES = ("v_co", "repa", "perceptual", "drifting", "hybrid")

METRIC_KEYS = ("step", "t_mean", "loss_total", "loss_vx", "loss_vd",
               "loss_aux", "grad_norm_pixel", "grad_norm_semantic",
               "uncond_fraction", "lr")


class TrainDivergence(RuntimeError):
    """Raised when a step produces a non-finite loss; carries a diagnostic."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class DropoutConfig:
    mode: str = "joint"        # "joint" or "independent"
    p_joint: float = 0.1
    p_label: float = 0.1
    p_semantic: float = 0.2

    def __post_init__(self):
        if self.mode not in ("joint", "independent"):
            raise ValueError("dropout mode must be 'joint' or 'independent'")
        for p in (self.p_joint, self.p_label, self.p_semantic):
            if not 0.0 <= p <= 1.0:
                raise ValueError("dropout probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 30
    warmup_epochs: int = 5
    ema_decays: tuple[float, ...] = (0.9996, 0.9998, 0.9999)
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    uncond_type: str = "semantic_to_pixel_mask"
    time_mu: float = schedule.DEFAULT_TIME_MU
    time_sigma: float = schedule.DEFAULT_TIME_SIGMA
    clip: float = schedule.DEFAULT_ONE_MINUS_T_CLIP
    calibration: str = "rms_scale"
    losses: tuple[str, ...] = ("v_co",)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    scalar_gate: float | None = None
    holdout: int = 512  # trailing samples excluded from training (eval real set)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.calibration not in CALIBRATION_MODES:
            raise ValueError(f"unknown calibration mode {self.calibration!r}")
        for name in self.losses:
            if name not in LOSS_NAMES:
                raise ValueError(f"unknown loss {name!r}")
        if "v_co" not in self.losses:
            raise ValueError("the velocity loss is always required")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, trainable: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros(p.shape, np.float32) for k, p in trainable.items()},
                   v={k: np.zeros(p.shape, np.float32) for k, p in trainable.items()})


@dataclass
class EmaState:
    shadows: dict[str, dict[str, np.ndarray]]  # decay key -> param name -> copy

    @classmethod
    def init(cls, params: dict[str, Tensor], decays) -> "EmaState":
        return cls(shadows={_decay_key(d): {k: p.data.copy() for k, p in params.items()}
                            for d in decays})


def _decay_key(decay: float) -> str:
    return format(decay, ".6g")


def warmup_lr(step: int, total_warmup_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over warmup, then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if total_warmup_steps <= 0 or step >= total_warmup_steps:
        return base_lr
    return base_lr * step / total_warmup_steps


def adam_step(trainable: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.95, eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """Standard Adam with bias correction; updates parameters in place."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in trainable.items():
        g = grads[name].astype(np.float32)
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = p.data - lr * update


def ema_update(state: EmaState, params: dict[str, Tensor]) -> None:
    """shadow <- decay*shadow + (1-decay)*params, per tracked decay."""
    for key, shadow in state.shadows.items():
        decay = np.float32(float(key))
        one_minus = np.float32(1.0) - decay
        for name, p in params.items():
            s = shadow[name]
            s *= decay
            s += one_minus * p.data


def apply_condition_dropout(rng: Rng, batch_size: int, dropout: DropoutConfig,
                            uncond_type: str):
    """Per-sample conditioning treatments.

    Returns (label_dropped, semantic_treated, uncond_fraction) boolean
    arrays; joint mode ties both treatments to one coin per sample.
    """
    if dropout.mode == "joint":
        coin = rng.uniform((batch_size,)) < dropout.p_joint
        label_dropped = coin.copy()
        semantic_treated = coin.copy()
    else:
        label_dropped = rng.uniform((batch_size,)) < dropout.p_label
        semantic_treated = rng.uniform((batch_size,)) < dropout.p_semantic
    if uncond_type == "class_only":
        semantic_treated = np.zeros(batch_size, dtype=bool)
        uncond = label_dropped
    else:
        uncond = label_dropped & semantic_treated
    return label_dropped, semantic_treated, float(uncond.mean())


def _treatment_arrays(semantic_treated: np.ndarray, uncond_type: str):
    b = len(semantic_treated)
    mask_types = np.zeros(b, dtype=np.int64)
    sem_modes = np.zeros(b, dtype=np.int64)
    if uncond_type == "semantic_to_pixel_mask":
        mask_types[semantic_treated] = M.MASK_SEMANTIC_TO_PIXEL
    elif uncond_type == "bidirectional_mask":
        mask_types[semantic_treated] = M.MASK_BIDIRECTIONAL
    elif uncond_type == "zero_semantic":
        sem_modes[semantic_treated] = M.SEM_ZERO
    elif uncond_type == "null_token":
        sem_modes[semantic_treated] = M.SEM_NULL_TOKEN
    return mask_types, sem_modes


def grad_norm(params: dict[str, Tensor], prefix: str) -> float:
    total = 0.0
    for name, p in params.items():
        if name.startswith(prefix) and p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


class Trainer:
    """Owns model parameters, optimizer/EMA state, and the step loop."""

    def __init__(self, model_cfg: M.ModelConfig, train_cfg: TrainConfig,
                 dataset, encoder: TE.TeacherEncoder, seed: int,
                 stats: TE.FeatureStats | None = None,
                 calibration: schedule.Calibration | None = None,
                 _init_params: bool = True):
        if train_cfg.uncond_type in ("semantic_to_pixel_mask", "bidirectional_mask") \
                and model_cfg.has_semantic and not model_cfg.joint_attention:
            raise ValueError("mask-based unconditional types require joint attention")
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.dataset = dataset
        self.encoder = encoder
        self.seed = int(seed)
        self.rng = Rng(seed)
        self.time_sampler = schedule.TimeSampler(train_cfg.time_mu, train_cfg.time_sigma)
        self.step = 0

        n_train = len(dataset) - train_cfg.holdout
        if n_train < train_cfg.batch_size:
            raise ValueError("dataset too small for the configured batch/holdout")
        self.n_train = n_train

        # stats are always fitted: evaluation needs them for every variant
        if stats is None:
            stats = TE.fit_stats(encoder, dataset.images[:n_train])
        self.stats = stats
        self.calibration = calibration
        if (self.calibration is None and model_cfg.has_semantic
                and train_cfg.calibration != "none"):
            self.calibration = TE.fit_calibration(encoder, dataset.images[:n_train],
                                                  self.stats)

        if _init_params:
            self.params = M.init_params(model_cfg, self.rng.child("init"))
            self.aux_params = (L.init_projector(self.rng.child("aux"),
                                                model_cfg.hidden, encoder.feature_dim)
                               if "repa" in train_cfg.losses else {})
            self.adam = AdamState.init(self._trainable())
            self.ema = EmaState.init(self.params, train_cfg.ema_decays)

        # clean semantic targets are deterministic per image: precompute
        self._sem_clean = None
        if model_cfg.has_semantic:
            calib = self.calibration if train_cfg.calibration == "rms_scale" else None
            self._sem_clean = TE.prepare_semantics(encoder, self.stats, calib,
                                                   dataset.images)
        self._tgt_feats = None
        if self._needs_teacher_losses():
            self._tgt_feats = TE.normalize(encoder.encode(dataset.images), self.stats)

    def _needs_teacher_losses(self) -> bool:
        return bool(set(self.cfg.losses) & {"repa", "perceptual", "drifting", "hybrid"})

    def _trainable(self) -> dict[str, Tensor]:
        out = {f"model/{k}": p for k, p in self.params.items()}
        out.update({f"aux/{k}": p for k, p in self.aux_params.items()})
        return out

    @property
    def steps_per_epoch(self) -> int:
        return self.n_train // self.cfg.batch_size

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.cfg.epochs

    @property
    def warmup_steps(self) -> int:
        return self.steps_per_epoch * self.cfg.warmup_epochs

    def _batch_indices(self, step: int) -> np.ndarray:
        epoch = step // self.steps_per_epoch
        perm = self.rng.child(f"epoch{epoch}").permutation(self.n_train)
        k = step % self.steps_per_epoch
        return perm[k * self.cfg.batch_size:(k + 1) * self.cfg.batch_size]

    # ------------------------------------------------------------------
    def train_step(self) -> dict:
        cfg, mc = self.cfg, self.model_cfg
        step = self.step
        rng = self.rng.child(f"step{step}")
        idx = self._batch_indices(step)
        images = self.dataset.images[idx]
        labels = self.dataset.labels[idx]
        b = len(labels)

        t = schedule.sample_time(rng.child("time"), self.time_sampler, b)
        eps_x = rng.child("noise_x").normal(images.shape)
        pair_x = schedule.interpolate(images, eps_x, t)
        v_x = schedule.velocity_target(images, eps_x)

        has_sem = mc.has_semantic
        if has_sem:
            d_clean = self._sem_clean[idx]
            t_sem = (schedule.time_shift(self.calibration.alpha, t)
                     if cfg.calibration == "time_shift" else t)
            eps_d = rng.child("noise_d").normal(d_clean.shape)
            pair_d = schedule.interpolate(d_clean, eps_d, t_sem)
            v_d = schedule.velocity_target(d_clean, eps_d)

        label_dropped, semantic_treated, uncond_fraction = apply_condition_dropout(
            rng.child("drop"), b, cfg.dropout,
            cfg.uncond_type if has_sem else "class_only")
        class_ids = np.where(label_dropped, M.NULL_CLASS, labels).astype(np.int64)
        mask_types, sem_modes = _treatment_arrays(
            semantic_treated if has_sem else np.zeros(b, dtype=bool), cfg.uncond_type)

        cond = M.Conditioning(
            t_pixel=t, class_ids=class_ids,
            t_semantic=t_sem if has_sem and cfg.calibration == "time_shift" else None,
            mask_types=mask_types, semantic_modes=sem_modes)

        for p in self._trainable().values():
            p.grad = None

        out = M.forward(mc, self.params, pair_x.z_t.astype(np.float32),
                        pair_d.z_t.astype(np.float32) if has_sem else None, cond)
        vhat_x = schedule.clean_to_velocity(out.pred_pixels, pair_x.z_t, t, cfg.clip)
        loss_vx = L.velocity_term(vhat_x, v_x)
        total = loss_vx
        loss_vd_val = 0.0
        if has_sem:
            vhat_d = schedule.clean_to_velocity(out.pred_semantics, pair_d.z_t,
                                                t_sem, cfg.clip)
            loss_vd = L.velocity_term(vhat_d, v_d)
            loss_vd_val = loss_vd.item()
            total = total + T.scale(loss_vd, cfg.weights.lambda_d)

        loss_aux_val = 0.0
        if self._needs_teacher_losses():
            total, loss_aux_val = self._add_aux_losses(total, out, idx, labels)

        total_val = total.item()
        if not np.isfinite(total_val):
            record = {"step": step, "loss_total": total_val,
                      "loss_vx": loss_vx.item(), "loss_vd": loss_vd_val}
            raise TrainDivergence(f"non-finite loss at step {step}", record)

        total.backward()
        gn_pixel = grad_norm(self.params, "pixel.")
        gn_semantic = grad_norm(self.params, "semantic.")

        lr_t = warmup_lr(step, self.warmup_steps, cfg.lr)
        trainable = self._trainable()
        grads = {k: (p.grad if p.grad is not None
                     else np.zeros(p.shape, np.float32))
                 for k, p in trainable.items()}
        adam_step(trainable, grads, self.adam, lr_t, cfg.adam_beta1,
                  cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
        ema_update(self.ema, self.params)

        self.step += 1
        return {"step": step, "t_mean": float(t.mean()),
                "loss_total": total_val, "loss_vx": loss_vx.item(),
                "loss_vd": loss_vd_val, "loss_aux": loss_aux_val,
                "grad_norm_pixel": gn_pixel, "grad_norm_semantic": gn_semantic,
                "uncond_fraction": uncond_fraction, "lr": lr_t}

    def _add_aux_losses(self, total, out: M.ForwardOutput, idx, labels):
        cfg, w = self.cfg, self.cfg.weights
        tgt_patches = self._tgt_feats[idx]
        aux_val = 0.0
        if "repa" in cfg.losses:
            h = out.hidden_pixel[self.model_cfg.repa_block_index - 1]
            term = T.scale(L.repa_loss(h, tgt_patches, self.aux_params), w.lambda_repa)
            total = total + term
            aux_val += term.item()
        if set(cfg.losses) & {"perceptual", "drifting", "hybrid"}:
            u_patches = TE.normalize(self.encoder.encode(out.pred_pixels), self.stats)
            b = u_patches.shape[0]
            if "perceptual" in cfg.losses:
                term = T.scale(L.perceptual_loss(u_patches, tgt_patches), w.lambda_perc)
                total = total + term
                aux_val += term.item()
            if set(cfg.losses) & {"drifting", "hybrid"}:
                flat = u_patches.reshape(b, -1)
                tgt_flat = tgt_patches.reshape(b, -1)
                if "drifting" in cfg.losses:
                    term = T.scale(L.drifting_loss(flat, tgt_flat, flat.data,
                                                   w.tau_drift), w.lambda_drift)
                    total = total + term
                    aux_val += term.item()
                if "hybrid" in cfg.losses:
                    term, _ = L.hybrid_loss(flat, tgt_flat, labels, w,
                                            cfg.scalar_gate)
                    total = total + term
                    aux_val += term.item()
        return total, aux_val

    def run(self, n_steps: int | None = None, metrics_path=None) -> list[dict]:
        end = self.total_steps if n_steps is None else self.step + n_steps
        records = []
        sink = open(metrics_path, "a") if metrics_path else None
        try:
            with T.single_thread_blas():
                while self.step < end:
                    rec = self.train_step()
                    records.append(rec)
                    if sink:
                        sink.write(json.dumps(rec) + "\n")
        finally:
            if sink:
                sink.close()
        return records

    # ------------------------------------------------------------------
    def config_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": structconf.to_dict(self.model_cfg),
            "train": structconf.to_dict(self.cfg),
            "teacher": {"patch_size": self.encoder.patch_size,
                        "in_channels": self.encoder.in_channels,
                        "feature_dim": self.encoder.feature_dim,
                        "seed": self.encoder.seed},
        }

    def save(self, path) -> None:
        entries: dict[str, np.ndarray] = {
            "step": np.array([self.step], dtype=np.int64),
            "seed": np.array([self.seed], dtype=np.int64),
            "teacher/seed": np.array([self.encoder.seed], dtype=np.int64),
            "teacher/patch_size": np.array([self.encoder.patch_size], dtype=np.int64),
            "teacher/in_channels": np.array([self.encoder.in_channels], dtype=np.int64),
            "teacher/feature_dim": np.array([self.encoder.feature_dim], dtype=np.int64),
            "config_json": np.frombuffer(
                json.dumps(self.config_dict()).encode("utf-8"), dtype=np.uint8),
        }
        if self.stats is not None:
            entries["stats/mean"] = self.stats.mean
            entries["stats/std"] = self.stats.std
        if self.calibration is not None:
            entries["calib/rms_pixels"] = np.array([self.calibration.rms_pixels],
                                                   dtype=np.float32)
            entries["calib/rms_features"] = np.array([self.calibration.rms_features],
                                                     dtype=np.float32)
        for k, p in self.params.items():
            entries[f"model/{k}"] = p.data
        for k, p in self.aux_params.items():
            entries[f"aux/{k}"] = p.data
        for k in self._trainable():
            entries[f"adam/m/{k}"] = self.adam.m[k]
            entries[f"adam/v/{k}"] = self.adam.v[k]
        for dkey, shadow in self.ema.shadows.items():
            for k, arr in shadow.items():
                entries[f"ema/{dkey}/{k}"] = arr
        serialization.write_records(path, entries)

    @classmethod
    def load(cls, path, dataset) -> "Trainer":
        entries = serialization.read_records(path)
        cfgd = json.loads(bytes(entries["config_json"]).decode("utf-8"))
        model_cfg = structconf.from_dict(M.ModelConfig, cfgd["model"])
        train_cfg = structconf.from_dict(TrainConfig, cfgd["train"])
        encoder = TE.TeacherEncoder(**cfgd["teacher"])

        stats = calibration = None
        if "stats/mean" in entries:
            stats = TE.FeatureStats(mean=entries["stats/mean"],
                                    std=entries["stats/std"])
        if "calib/rms_pixels" in entries:
            calibration = schedule.Calibration(
                rms_pixels=float(entries["calib/rms_pixels"][0]),
                rms_features=float(entries["calib/rms_features"][0]))

        tr = cls(model_cfg, train_cfg, dataset, encoder, cfgd["seed"],
                 stats=stats, calibration=calibration, _init_params=False)
        tr.step = int(entries["step"][0])
        tr.params = {k[len("model/"):]: Tensor(v, requires_grad=True)
                     for k, v in entries.items() if k.startswith("model/")}
        tr.aux_params = {k[len("aux/"):]: Tensor(v, requires_grad=True)
                         for k, v in entries.items()
                         if k.startswith("aux/") and not k.startswith("adam/")}
        tr.adam = AdamState(
            m={k[len("adam/m/"):]: v.copy() for k, v in entries.items()
               if k.startswith("adam/m/")},
            v={k[len("adam/v/"):]: v.copy() for k, v in entries.items()
               if k.startswith("adam/v/")},
            step=tr.step)
        shadows: dict[str, dict[str, np.ndarray]] = {}
        for k, v in entries.items():
            if k.startswith("ema/"):
                _, dkey, name = k.split("/", 2)
                shadows.setdefault(dkey, {})[name] = v.copy()
        tr.ema = EmaState(shadows=shadows)
        return tr


@dataclass
class CheckpointBundle:
    """Everything needed to sample and evaluate from a saved run."""

    model_cfg: M.ModelConfig
    train_cfg: TrainConfig
    params: dict[str, Tensor]
    ema: dict[str, dict[str, np.ndarray]]
    encoder: TE.TeacherEncoder
    stats: TE.FeatureStats | None
    calibration: schedule.Calibration | None
    seed: int
    step: int
    config: dict

    def select_params(self, weights: str = "final") -> dict[str, Tensor]:
        """'final' for the trained weights, 'ema:<decay>' for a shadow set."""
        if weights == "final":
            return self.params
        if weights.startswith("ema:"):
            key = weights[len("ema:"):]
            if key not in self.ema:
                raise ValueError(f"no EMA shadow {key!r}; have {sorted(self.ema)}")
            return {k: Tensor(v.copy(), requires_grad=False)
                    for k, v in self.ema[key].items()}
        raise ValueError(f"unknown weights selector {weights!r}")


def load_checkpoint_bundle(path) -> CheckpointBundle:
    entries = serialization.read_records(path)
    cfgd = json.loads(bytes(entries["config_json"]).decode("utf-8"))
    model_cfg = structconf.from_dict(M.ModelConfig, cfgd["model"])
    train_cfg = structconf.from_dict(TrainConfig, cfgd["train"])
    encoder = TE.TeacherEncoder(**cfgd["teacher"])
    stats = calibration = None
    if "stats/mean" in entries:
        stats = TE.FeatureStats(mean=entries["stats/mean"], std=entries["stats/std"])
    if "calib/rms_pixels" in entries:
        calibration = schedule.Calibration(
            rms_pixels=float(entries["calib/rms_pixels"][0]),
            rms_features=float(entries["calib/rms_features"][0]))
    params = {k[len("model/"):]: Tensor(v, requires_grad=False)
              for k, v in entries.items() if k.startswith("model/")}
    ema: dict[str, dict[str, np.ndarray]] = {}
    for k, v in entries.items():
        if k.startswith("ema/"):
            _, dkey, name = k.split("/", 2)
            ema.setdefault(dkey, {})[name] = v
    return CheckpointBundle(
        model_cfg=model_cfg, train_cfg=train_cfg, params=params, ema=ema,
        encoder=encoder, stats=stats, calibration=calibration,
        seed=int(entries["seed"][0]), step=int(entries["step"][0]), config=cfgd)
