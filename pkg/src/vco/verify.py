"""Invariant suite behind the ``verify`` command.

Each check returns a result with a worst-case measurement, so CI and the
acceptance tests exercise exactly the same code paths and tolerances:
gradient oracles for every primitive and the full model loss, structural
attention-mask invariance, SNR equivalence of rescaling vs time shifting,
brute-force field oracles, stop-gradient semantics, and solver order.

The field oracles here are deliberately naive double loops, independent of
the vectorized implementations they check. The full-model gradient check
covers the differentiable objective (velocity + alignment + perceptual);
the stop-gradient field losses define their gradients analytically and are
verified against that definition in their own check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import model as M
from . import sampler as SM
from . import schedule as S
from . import tensor as T
from . import teacher as TE
from .rng import Rng
from .tensor import Tensor, grad_check


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


# ---------------------------------------------------------------------------
# 1. gradient correctness

def _primitive_cases():
    mask = np.array([True, False, True, True, True, True])
    gain = np.linspace(0.5, 1.5, 6, dtype=np.float32)
    return {
        "add": lambda x: (x + x * 0.5).sum(),
        "sub": lambda x: (x - x * 2.0).mean(),
        "mul": lambda x: (x * x).sum(),
        "scale": lambda x: T.scale(x, 1.7).sum(),
        "silu": lambda x: T.silu(x).sum(),
        "gelu": lambda x: T.gelu(x).sum(),
        "tanh": lambda x: T.tanh(x).sum(),
        "mean": lambda x: (x.mean(axis=0) * np.arange(6, dtype=np.float32)).sum(),
        "sum": lambda x: (x.sum(axis=1, keepdims=True) * x).sum(),
        "reshape": lambda x: (x.reshape(3, 2, 6) * x.reshape(3, 2, 6)).sum(),
        "transpose": lambda x: (x.transpose((1, 0)) @ x).sum(),
        "concat": lambda x: (T.concat([x, x * 2.0], axis=0) *
                             T.concat([x * 0.5, x], axis=0)).sum(),
        "slice": lambda x: (T.narrow(x, 1, 1, 3) * T.narrow(x, 1, 2, 3)).sum(),
        "rms_norm": lambda x: (T.rms_norm(x, Tensor(gain)) *
                               T.rms_norm(x, Tensor(gain))).sum(),
        "softmax_masked": lambda x: (T.softmax_masked(x, mask) * x).sum(),
        "matmul": lambda x: (x @ x.transpose((1, 0))).sum(),
        "embedding": lambda x: (T.embedding(x, np.array([0, 2, 2, 5])) *
                                T.embedding(x, np.array([1, 2, 3, 4]))).sum(),
    }


def check_gradient_primitives(seeds: int = 100, tol: float = 1e-3) -> CheckResult:
    rng = Rng(2024)
    worst = 0.0
    worst_case = ""
    for name, f in _primitive_cases().items():
        for trial in range(seeds):
            x = Tensor(rng.child(f"{name}{trial}").normal((6, 6)))
            err = grad_check(f, x)
            if err > worst:
                worst, worst_case = err, f"{name}[{trial}]"
    return CheckResult("gradient_primitives", worst < tol,
                       f"max rel err {worst:.2e} ({worst_case}), tol {tol:g}")


def _toy_setup(seed: int):
    """2-token model: 8x4 image, patch 4 -> a (2, 1) patch grid."""
    cfg = M.ModelConfig(variant="dual_stream", depth=1, hidden=16, heads=2,
                        image_height=8, image_width=4, patch_size=4,
                        n_classes=2, feature_dim=4, repa_block_index=1)
    rng = Rng(seed)
    params = M.init_params(cfg, rng.child("p"))
    projector = L.init_projector(rng.child("proj"), cfg.hidden, cfg.feature_dim)
    enc = TE.TeacherEncoder(patch_size=4, in_channels=1, feature_dim=4,
                            seed=seed + 1)
    stats = TE.FeatureStats(mean=np.zeros(4, np.float32),
                            std=np.ones(4, np.float32))
    return cfg, params, projector, enc, stats


def check_gradient_model_loss(seeds: int = 100, tol: float = 1e-2) -> CheckResult:
    """Central differences against the backward pass of the differentiable
    training objective (velocity + alignment + perceptual) on a 2-token toy
    model, at float32 precision.

    The loss is expressed as a function of the clean image: interpolation,
    forward pass, velocity conversion, and velocity target all flow from the
    perturbed input, and every fourth seed checks a parameter tensor instead.
    """
    worst = 0.0
    clip = 0.05
    for trial in range(seeds):
        cfg, params, projector, enc, stats = _toy_setup(3000 + trial)
        rng = Rng(7000 + trial)
        clean_x = rng.normal((1, 1, 8, 4))
        t = np.array([0.25 + 0.5 * float(rng.uniform(()))])
        eps_x = rng.normal(clean_x.shape)
        eps_d = rng.normal((1, cfg.n_tokens, cfg.feature_dim))
        clean_d = TE.normalize(enc.encode(clean_x), stats)
        z_d = S.interpolate(clean_d, eps_d, t).z_t.astype(np.float32)
        v_d = S.velocity_target(clean_d, eps_d)
        cond = M.Conditioning(t_pixel=t, class_ids=np.array([trial % 2]))
        tt = t.reshape(-1, 1, 1, 1).astype(np.float32)
        inv = (1.0 / np.maximum(1.0 - t, clip)).reshape(-1, 1, 1, 1).astype(np.float32)
        tgt = clean_d

        def full_loss(x):
            z_x = x * tt + eps_x * (1.0 - tt)
            out = M.forward(cfg, params, z_x, Tensor(z_d), cond)
            vhat_x = (out.pred_pixels - z_x) * inv
            vhat_d = S.clean_to_velocity(out.pred_semantics, z_d, t, clip)
            total = L.mean_squared_norm(vhat_x - (x - eps_x))
            total = total + T.scale(L.velocity_term(vhat_d, v_d), 0.1)
            total = total + L.repa_loss(out.hidden_pixel[0], tgt, projector)
            u = TE.normalize(enc.encode(out.pred_pixels), stats)
            return total + L.perceptual_loss(u, tgt)

        if trial % 4 == 3:
            name = ("pixel.block0.norm1.gain", "semantic.head.b",
                    "cond.time_mlp.b2")[trial % 3]
            x0 = Tensor(clean_x.astype(np.float32))

            def f(p):
                saved = params[name]
                params[name] = p
                try:
                    return full_loss(x0)
                finally:
                    params[name] = saved

            err = grad_check(f, params[name])
        else:
            err = grad_check(full_loss, Tensor(clean_x.astype(np.float32)))
        worst = max(worst, err)
    return CheckResult("gradient_model_loss", worst < tol,
                       f"max rel err {worst:.2e} over {seeds} seeds, tol {tol:g}")


# ---------------------------------------------------------------------------
# 2. structural guidance invariance

def check_mask_invariance(tol: float = 1e-5) -> CheckResult:
    cfg = M.ModelConfig(variant="dual_stream", depth=4, hidden=64, heads=4)
    params = M.init_params(cfg, Rng(11))
    rng = Rng(12)
    b = 4
    z_x = rng.normal((b, 1, 16, 16))
    z_x2 = rng.normal((b, 1, 16, 16))
    z_d1 = rng.normal((b, cfg.n_tokens, cfg.feature_dim))
    z_d2 = rng.normal((b, cfg.n_tokens, cfg.feature_dim))

    def run(mask, z_x_in, z_d_in):
        cond = M.Conditioning(
            t_pixel=np.full(b, 0.3),
            class_ids=np.full(b, M.NULL_CLASS, dtype=np.int64),
            mask_types=np.full(b, mask, dtype=np.int64))
        return M.forward(cfg, params, z_x_in, z_d_in, cond)

    s2p_a = run(M.MASK_SEMANTIC_TO_PIXEL, z_x, z_d1)
    s2p_b = run(M.MASK_SEMANTIC_TO_PIXEL, z_x, z_d2)
    diff_s2p = float(np.abs(s2p_a.pred_pixels.data - s2p_b.pred_pixels.data).max())
    s2p_px = run(M.MASK_SEMANTIC_TO_PIXEL, z_x2, z_d1)
    sem_sens = float(np.abs(s2p_a.pred_semantics.data - s2p_px.pred_semantics.data).max())

    bid_a = run(M.MASK_BIDIRECTIONAL, z_x, z_d1)
    bid_b = run(M.MASK_BIDIRECTIONAL, z_x, z_d2)
    bid_c = run(M.MASK_BIDIRECTIONAL, z_x2, z_d1)
    diff_bid_x = float(np.abs(bid_a.pred_pixels.data - bid_b.pred_pixels.data).max())
    diff_bid_d = float(np.abs(bid_a.pred_semantics.data - bid_c.pred_semantics.data).max())

    open_a = run(M.MASK_NONE, z_x, z_d1)
    open_b = run(M.MASK_NONE, z_x, z_d2)
    diff_open = float(np.abs(open_a.pred_pixels.data - open_b.pred_pixels.data).max())

    passed = (diff_s2p <= tol and diff_bid_x <= tol and diff_bid_d <= tol
              and diff_open > 0 and sem_sens > 0)
    return CheckResult(
        "mask_invariance", passed,
        f"s2p {diff_s2p:.1e}, bidir ({diff_bid_x:.1e}, {diff_bid_d:.1e}), "
        f"unmasked sensitivity {diff_open:.1e}, d-to-x pathway {sem_sens:.1e}")


# ---------------------------------------------------------------------------
# 3. SNR equivalence

def check_snr_equivalence(n: int = 1000, tol: float = 1e-6) -> CheckResult:
    rng = Rng(21)
    worst_snr = 0.0
    worst_rt = 0.0
    for i in range(n):
        r = rng.child(f"s{i}")
        alpha = float(10 ** (r.uniform(()) * 2 - 1))
        t = float(0.001 + 0.998 * r.uniform(()))
        power = float(0.5 + 2.0 * r.uniform(()))
        lhs = S.snr(t, alpha * alpha * power)
        rhs = S.snr(S.time_shift(alpha, t), power)
        worst_snr = max(worst_snr, abs(lhs - rhs) / abs(lhs))
        rt = S.time_shift(1.0 / alpha, S.time_shift(alpha, t))
        worst_rt = max(worst_rt, abs(rt - t))
    passed = worst_snr < tol and worst_rt < tol
    return CheckResult("snr_equivalence", passed,
                       f"max rel snr err {worst_snr:.2e}, "
                       f"max roundtrip err {worst_rt:.2e}, tol {tol:g}")


# ---------------------------------------------------------------------------
# 4. field oracles (naive double loops, independent of losses.py)

def _oracle_drift(u, pos, neg, tau):
    def side(members):
        d2 = [float(np.sum((m - u) ** 2)) for m in members]
        base = min(d2)
        num = np.zeros_like(u)
        den = 0.0
        for mm, dd in zip(members, d2):
            w = np.exp(-(dd - base) / tau)
            num = num + w * (mm - u)
            den += w
        return num / den

    return side(pos) - side(neg)


def _oracle_hybrid(feats, targets, ids, weights):
    b, f = feats.shape
    out = np.zeros((b, f))
    for i in range(b):
        v_pos = targets[i] - feats[i]
        nb = [j for j in range(b) if j != i and ids[j] == ids[i]]
        v_neg = np.zeros(f)
        if nb:
            d2 = [float(np.sum((feats[j] - feats[i]) ** 2)) for j in nb]
            base = min(d2)
            ws = [np.exp(-(dd - base) / weights.tau_rep) for dd in d2]
            z = sum(ws)
            cent = np.zeros(f)
            for j, wj in zip(nb, ws):
                cent += (wj / z) * feats[j]
            v_neg = cent - feats[i]
        s = np.exp(-float(np.sum((feats[i] - targets[i]) ** 2)) / weights.tau_gate)
        out[i] = s * v_pos - (1 - s) * v_neg
    return out


def check_field_oracles(n_batches: int = 200, tol: float = 1e-6) -> CheckResult:
    rng = Rng(31)
    w = L.LossWeights()
    worst_drift = worst_hyb = worst_rowsum = 0.0
    for trial in range(n_batches):
        r = rng.child(f"b{trial}")
        b = 2 + int(r.uniform(()) * 14)
        f = 2 + int(r.uniform(()) * 14)
        tau = 0.1 + 2.0 * float(r.uniform(()))
        u = r.normal((f,)).astype(np.float64)
        pos = r.normal((1 + int(r.uniform(()) * 9), f)).astype(np.float64)
        neg = r.normal((1 + int(r.uniform(()) * 9), f)).astype(np.float64)
        got = L.drifting_field(u, pos, neg, tau)
        worst_drift = max(worst_drift, float(np.abs(got - _oracle_drift(u, pos, neg, tau)).max()))

        feats = r.normal((b, f)).astype(np.float64)
        targets = r.normal((b, f)).astype(np.float64)
        ids = r.integers(0, 3, (b,))
        batch = L.hybrid_field(feats, targets, ids, w)
        worst_hyb = max(worst_hyb, float(np.abs(batch.v_hyb - _oracle_hybrid(feats, targets, ids, w)).max()))
        for i in range(b):
            if np.any((ids == ids[i]) & (np.arange(b) != i)):
                worst_rowsum = max(worst_rowsum, abs(batch.alphas[i].sum() - 1.0))

    # gate limits at distance extremes
    far = L.hybrid_field(np.zeros((2, 4)), np.full((2, 4), 50.0),
                         np.zeros(2, dtype=int), L.LossWeights(tau_gate=1.0))
    near = L.hybrid_field(np.ones((2, 4)), np.ones((2, 4)),
                          np.zeros(2, dtype=int), L.LossWeights(tau_gate=1.0))
    gate_far = float(np.abs(far.v_hyb + far.v_neg).max())      # -> -V-
    gate_near = float(np.abs(near.v_hyb - near.v_pos).max())   # -> V+
    passed = (worst_drift < tol and worst_hyb < tol and worst_rowsum < 1e-6
              and gate_far < 1e-6 and gate_near < 1e-12)
    return CheckResult("field_oracles", passed,
                       f"drift {worst_drift:.2e}, hybrid {worst_hyb:.2e}, "
                       f"row-sum {worst_rowsum:.2e}, gate limits "
                       f"({gate_far:.1e}, {gate_near:.1e})")


# ---------------------------------------------------------------------------
# 5. stop-gradient semantics

def check_stop_gradient_semantics(n_batches: int = 20, tol: float = 1e-4) -> CheckResult:
    rng = Rng(41)
    w = L.LossWeights(lambda_hyb=10.0)
    worst = 0.0
    for trial in range(n_batches):
        r = rng.child(f"g{trial}")
        b, f = 4 + int(r.uniform(()) * 8), 6
        u = Tensor(r.normal((b, f)), requires_grad=True)
        pos = r.normal((8, f)).astype(np.float64)
        L.drifting_loss(u, pos, u.data.astype(np.float64), 0.5).backward()
        field = np.stack([L.drifting_field(u.data[i], pos, u.data, 0.5)
                          for i in range(b)])
        expected = -2.0 * field / b
        scale = max(1.0, float(np.abs(expected).max()))
        worst = max(worst, float(np.abs(u.grad - expected).max()) / scale)

        u2 = Tensor(r.normal((b, f)), requires_grad=True)
        targets = r.normal((b, f))
        ids = r.integers(0, 2, (b,))
        loss, batch = L.hybrid_loss(u2, targets, ids, w)
        loss.backward()
        expected2 = -2.0 * w.lambda_hyb * batch.v_hyb / b
        scale2 = max(1.0, float(np.abs(expected2).max()))
        worst = max(worst, float(np.abs(u2.grad - expected2).max()) / scale2)
    return CheckResult("stop_gradient_semantics", worst < tol,
                       f"max rel err {worst:.2e} over {n_batches} batches, tol {tol:g}")


# ---------------------------------------------------------------------------
# 6. solver order

def check_solver_order() -> CheckResult:
    def err(steps):
        def field(state, t):
            return (-state[0],)

        grid = np.linspace(0.0, 1.0, steps + 1)
        (out,) = SM.heun_path(field, (np.array([1.0]),), grid)
        return float(abs(out[0] - np.exp(-1.0)) / np.exp(-1.0))

    e50, e100 = err(50), err(100)
    order = float(np.log2(e50 / e100))
    passed = e50 < 1e-3 and 1.8 <= order <= 2.2
    return CheckResult("solver_order", passed,
                       f"50-step rel err {e50:.2e}, empirical order {order:.3f}")


# ---------------------------------------------------------------------------

def run_all(grad_seeds: int = 100) -> list[CheckResult]:
    return [
        check_gradient_primitives(seeds=grad_seeds),
        check_gradient_model_loss(seeds=grad_seeds),
        check_mask_invariance(),
        check_snr_equivalence(),
        check_field_oracles(),
        check_stop_gradient_semantics(),
        check_solver_order(),
    ]
