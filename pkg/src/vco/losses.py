"""Training objectives: the joint velocity loss plus the auxiliary losses
that supervise the predicted image in frozen-encoder feature space.

* velocity loss        — mean over the batch of squared-error norms, with the
  semantic stream weighted by lambda_d.
* alignment loss       — a trainable 2-layer projector maps an intermediate
  pixel-stream hidden state onto the teacher features of the CLEAN image.
* perceptual loss      — squared feature distance between predicted and clean
  images, differentiated through the frozen teacher.
* drifting loss        — kernel field V = V+ - V-, each side a normalized
  kernel-weighted mean of (member - u) over a positive (real) and negative
  (generated) feature set; applied through a stop-gradient target, so the
  loss value equals mean ||V||^2 and the gradient is -2 V / B.
* hybrid loss          — paired attraction V+ = target - u combined with
  same-class repulsion V- (row-stochastic kernel weights alpha over other
  samples of the class) through a similarity gate s = exp(-||u-target||^2 /
  tau_gate): V_hyb = s V+ - (1-s) V-. Far from the target the gate closes
  and repulsion dominates; at the target s = 1 and attraction is pure.

Field computations run in float64 on detached features; only the final
stop-gradient quadratic touches the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 0.1
    lambda_hyb: float = 10.0
    tau_gate: float = 10.0
    tau_rep: float = 0.2
    tau_drift: float = 0.2
    lambda_repa: float = 1.0
    lambda_perc: float = 1.0
    lambda_drift: float = 1.0

    def __post_init__(self):
        if min(self.tau_gate, self.tau_rep, self.tau_drift) <= 0:
            raise ValueError("temperatures must be strictly positive")
        if min(self.lambda_d, self.lambda_hyb, self.lambda_repa,
               self.lambda_perc, self.lambda_drift) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class HybridFieldBatch:
    """Per-sample pieces of the gated attraction/repulsion field."""

    features: np.ndarray    # u_i, (B, F) generated features
    targets: np.ndarray     # (B, F) clean-image features
    class_ids: np.ndarray   # (B,)
    gates: np.ndarray       # s_i in (0, 1]
    alphas: np.ndarray      # (B, B) row-stochastic over same-class j != i
    v_pos: np.ndarray       # (B, F)
    v_neg: np.ndarray       # (B, F)
    v_hyb: np.ndarray       # (B, F)


def mean_squared_norm(diff: Tensor) -> Tensor:
    """mean over batch of per-sample squared L2 norms."""
    b = diff.shape[0]
    return T.scale((diff * diff).sum(), 1.0 / b)


def velocity_term(vhat: Tensor, v) -> Tensor:
    return mean_squared_norm(vhat - np.asarray(v, dtype=np.float32))


def v_co_loss(vhat_x: Tensor, v_x, vhat_d: Tensor | None, v_d,
              lambda_d: float) -> Tensor:
    loss = velocity_term(vhat_x, v_x)
    if vhat_d is not None and lambda_d > 0:
        loss = loss + T.scale(velocity_term(vhat_d, v_d), lambda_d)
    return loss


# ---------------------------------------------------------------------------
# alignment projector (intermediate hidden state -> teacher feature space)

def init_projector(rng: Rng, hidden: int, feature_dim: int) -> dict[str, Tensor]:
    r = rng.child("projector")
    raw = {
        "aux.projector.w1": r.normal((hidden, hidden)) / np.sqrt(hidden),
        "aux.projector.b1": np.zeros(hidden, dtype=np.float32),
        "aux.projector.w2": r.normal((hidden, feature_dim)) / np.sqrt(hidden),
        "aux.projector.b2": np.zeros(feature_dim, dtype=np.float32),
    }
    return {k: Tensor(np.asarray(v, dtype=np.float32), requires_grad=True)
            for k, v in raw.items()}


def repa_loss(h_ell: Tensor, target_features: np.ndarray,
              projector: dict[str, Tensor]) -> Tensor:
    """MSE between the projected hidden state and clean-image features."""
    u = T.silu(T.matmul(h_ell, projector["aux.projector.w1"]) + projector["aux.projector.b1"])
    proj = T.matmul(u, projector["aux.projector.w2"]) + projector["aux.projector.b2"]
    diff = proj - np.asarray(target_features, dtype=np.float32)
    return (diff * diff).mean()


def perceptual_loss(pred_features: Tensor, clean_features: np.ndarray) -> Tensor:
    """Feature-space distance; callers pass phi(pred) with gradients flowing
    through the frozen encoder, and detached phi(clean)."""
    diff = pred_features - np.asarray(clean_features, dtype=np.float32)
    return mean_squared_norm(diff)


# ---------------------------------------------------------------------------
# drifting field

def _kernel_weights(u: np.ndarray, members: np.ndarray, tau: float) -> np.ndarray:
    """exp(-||u - m||^2 / tau) with the common max factored out, so the
    normalizer stays strictly positive at float precision."""
    d2 = np.sum((members - u) ** 2, axis=-1)
    return np.exp(-(d2 - d2.min()) / tau)


def drifting_field(u: np.ndarray, pos_set: np.ndarray, neg_set: np.ndarray,
                   tau: float) -> np.ndarray:
    """V(u) = V+(u) - V-(u), each side a kernel-weighted mean of
    (member - u) normalized by the total kernel weight."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    u = np.asarray(u, dtype=np.float64)
    pos = np.asarray(pos_set, dtype=np.float64)
    neg = np.asarray(neg_set, dtype=np.float64)
    if pos.shape[0] < 1 or neg.shape[0] < 1:
        raise ValueError("both feature sets must be non-empty")

    wp = _kernel_weights(u, pos, tau)
    wn = _kernel_weights(u, neg, tau)
    v_pos = (wp[:, None] * (pos - u)).sum(axis=0) / wp.sum()
    v_neg = (wn[:, None] * (neg - u)).sum(axis=0) / wn.sum()
    return v_pos - v_neg


def drifting_loss(u: Tensor, pos_set: np.ndarray, neg_set: np.ndarray,
                  tau: float) -> Tensor:
    """mean_i ||u_i - sg(u_i + V(u_i))||^2 over the batch.

    The whole target is gradient-frozen, so the value equals mean ||V||^2
    and d/du = -2 V / B.
    """
    b = u.shape[0]
    field = np.stack([drifting_field(u.data[i], pos_set, neg_set, tau)
                      for i in range(b)])
    target = (u.data.astype(np.float64) + field).astype(np.float32)
    return mean_squared_norm(u - target)


# ---------------------------------------------------------------------------
# perceptual-drifting hybrid

def hybrid_gate(u_i: np.ndarray, target_i: np.ndarray, tau_gate: float) -> float:
    """s = exp(-||u - target||^2 / tau_gate) in (0, 1]."""
    if tau_gate <= 0:
        raise ValueError("tau_gate must be positive")
    d2 = float(np.sum((np.asarray(u_i, np.float64) - np.asarray(target_i, np.float64)) ** 2))
    return float(np.exp(-d2 / tau_gate))


def repulsion_weights(features: np.ndarray, class_ids: np.ndarray, i: int,
                      tau_rep: float) -> np.ndarray:
    """Row alpha_{i.}: softmax of -||u_i - u_j||^2 / tau_rep over same-class
    j != i; other entries 0. An empty neighbor set yields an all-zero row."""
    if tau_rep <= 0:
        raise ValueError("tau_rep must be positive")
    feats = np.asarray(features, dtype=np.float64)
    ids = np.asarray(class_ids)
    b = feats.shape[0]
    neighbors = (ids == ids[i]) & (np.arange(b) != i)
    out = np.zeros(b, dtype=np.float64)
    if not neighbors.any():
        return out
    d2 = np.sum((feats[neighbors] - feats[i]) ** 2, axis=1)
    logits = -(d2 - d2.min()) / tau_rep
    w = np.exp(logits)
    out[neighbors] = w / w.sum()
    return out


def hybrid_field(features: np.ndarray, targets: np.ndarray,
                 class_ids: np.ndarray, weights: LossWeights,
                 scalar_gate: float | None = None) -> HybridFieldBatch:
    """Gated combination V_hyb = s V+ - (1-s) V- per sample.

    V+ pulls toward the paired clean-image feature; V- points toward the
    kernel-weighted centroid of same-class generated neighbors. Samples with
    no same-class neighbor use V- = 0. `scalar_gate` replaces the adaptive
    gate with a constant (ablation mode).
    """
    u = np.asarray(features, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    ids = np.asarray(class_ids)
    b = u.shape[0]

    v_pos = tgt - u
    alphas = np.stack([repulsion_weights(u, ids, i, weights.tau_rep)
                       for i in range(b)])
    v_neg = alphas @ u - np.where(alphas.sum(axis=1, keepdims=True) > 0, u, 0.0)
    if scalar_gate is None:
        gates = np.array([hybrid_gate(u[i], tgt[i], weights.tau_gate)
                          for i in range(b)])
    else:
        gates = np.full(b, float(scalar_gate))
    v_hyb = gates[:, None] * v_pos - (1.0 - gates[:, None]) * v_neg
    return HybridFieldBatch(features=u, targets=tgt, class_ids=ids,
                            gates=gates, alphas=alphas,
                            v_pos=v_pos, v_neg=v_neg, v_hyb=v_hyb)


def hybrid_loss(u: Tensor, targets: np.ndarray, class_ids: np.ndarray,
                weights: LossWeights, scalar_gate: float | None = None,
                ) -> tuple[Tensor, HybridFieldBatch]:
    """lambda_hyb * mean_i ||u_i - sg(u_i + V_hyb,i)||^2."""
    batch = hybrid_field(u.data, targets, class_ids, weights, scalar_gate)
    target = (u.data.astype(np.float64) + batch.v_hyb).astype(np.float32)
    loss = T.scale(mean_squared_norm(u - target), weights.lambda_hyb)
    return loss, batch
