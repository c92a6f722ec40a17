import numpy as np
import pytest

from vco import losses as L
from vco.rng import Rng
from vco.tensor import Tensor


# ---------------------------------------------------------------------------
# independent double-loop oracles (direct formula transcription; min-distance
# factored out of the kernel exactly as in any stable evaluation)

def oracle_drifting_field(u, pos, neg, tau):
    def side(members):
        d2 = [float(np.sum((m - u) ** 2)) for m in members]
        base = min(d2)
        num = np.zeros_like(u, dtype=np.float64)
        den = 0.0
        for m, d in zip(members, d2):
            w = np.exp(-(d - base) / tau)
            num += w * (m - u)
            den += w
        return num / den

    return side(pos) - side(neg)


def oracle_hybrid_field(features, targets, class_ids, w, scalar_gate=None):
    b, f = features.shape
    out = np.zeros((b, f), dtype=np.float64)
    for i in range(b):
        v_pos = targets[i] - features[i]
        neighbors = [j for j in range(b)
                     if j != i and class_ids[j] == class_ids[i]]
        v_neg = np.zeros(f, dtype=np.float64)
        if neighbors:
            d2 = [float(np.sum((features[j] - features[i]) ** 2)) for j in neighbors]
            base = min(d2)
            weights = [np.exp(-(d - base) / w.tau_rep) for d in d2]
            z = sum(weights)
            centroid = np.zeros(f, dtype=np.float64)
            for j, wt in zip(neighbors, weights):
                centroid += (wt / z) * features[j]
            v_neg = centroid - features[i]
        if scalar_gate is None:
            s = np.exp(-float(np.sum((features[i] - targets[i]) ** 2)) / w.tau_gate)
        else:
            s = scalar_gate
        out[i] = s * v_pos - (1 - s) * v_neg
    return out


# ---------------------------------------------------------------------------

def test_v_co_loss_perfect_prediction():
    v = Rng(0).normal((4, 8))
    loss = L.v_co_loss(Tensor(v), v, Tensor(v), v, lambda_d=0.1)
    assert loss.item() == 0.0


def test_v_co_loss_lambda_zero_is_pixel_only():
    rng = Rng(1)
    vx, vxt = Tensor(rng.normal((4, 8))), rng.normal((4, 8))
    vd, vdt = Tensor(rng.normal((4, 6))), rng.normal((4, 6))
    pixel_only = L.v_co_loss(vx, vxt, None, None, lambda_d=0.0)
    with_sem = L.v_co_loss(vx, vxt, vd, vdt, lambda_d=0.0)
    assert pixel_only.item() == with_sem.item()


def test_v_co_loss_weighted_sum():
    vx = Tensor(np.ones((2, 3), dtype=np.float32))
    vd = Tensor(np.ones((2, 4), dtype=np.float32))
    zx = np.zeros((2, 3), dtype=np.float32)
    zd = np.zeros((2, 4), dtype=np.float32)
    loss = L.v_co_loss(vx, zx, vd, zd, lambda_d=0.1)
    assert loss.item() == pytest.approx(3.0 + 0.1 * 4.0, rel=1e-6)


def test_v_co_loss_nonnegative_zero_iff_exact():
    rng = Rng(2)
    for i in range(20):
        r = rng.child(f"i{i}")
        vx, vxt = r.normal((3, 5)), r.normal((3, 5))
        loss = L.v_co_loss(Tensor(vx), vxt, None, None, 0.1)
        assert loss.item() >= 0
        assert (loss.item() == 0) == np.array_equal(vx, vxt)


def test_repa_loss_zero_when_matched():
    rng = Rng(3)
    proj = L.init_projector(rng, hidden=16, feature_dim=8)
    h = Tensor(rng.normal((2, 4, 16)), requires_grad=True)
    # compute target as the projector output itself
    import vco.tensor as T
    u = T.silu(T.matmul(h, proj["aux.projector.w1"]) + proj["aux.projector.b1"])
    target = (T.matmul(u, proj["aux.projector.w2"]) + proj["aux.projector.b2"]).data
    assert L.repa_loss(h, target, proj).item() == pytest.approx(0.0, abs=1e-12)


def test_repa_loss_grad_reaches_projector_and_backbone():
    rng = Rng(4)
    proj = L.init_projector(rng, hidden=16, feature_dim=8)
    h = Tensor(rng.normal((2, 4, 16)), requires_grad=True)
    target = rng.normal((2, 4, 8))
    L.repa_loss(h, target, proj).backward()
    assert h.grad is not None and np.any(h.grad)
    for p in proj.values():
        assert p.grad is not None and np.any(p.grad)


def test_perceptual_loss_zero_and_grad():
    from vco.teacher import TeacherEncoder

    enc = TeacherEncoder(patch_size=4, in_channels=1, feature_dim=8, seed=9)
    rng = Rng(5)
    img = rng.normal((2, 1, 8, 8))
    clean_feats = enc.encode(img)
    pred = Tensor(img.copy(), requires_grad=True)
    loss = L.perceptual_loss(enc.encode(pred), clean_feats)
    assert loss.item() == 0.0

    pred2 = Tensor(img + 0.1, requires_grad=True)
    loss2 = L.perceptual_loss(enc.encode(pred2), clean_feats)
    loss2.backward()
    assert loss2.item() > 0
    assert np.any(pred2.grad)


def test_perceptual_loss_grad_matches_finite_differences():
    from vco.teacher import TeacherEncoder
    from vco.tensor import grad_check

    enc = TeacherEncoder(patch_size=2, in_channels=1, feature_dim=4, seed=10)
    rng = Rng(6)
    clean = enc.encode(rng.normal((1, 1, 4, 4)))
    x = Tensor(rng.normal((1, 1, 4, 4)))
    err = grad_check(lambda v: L.perceptual_loss(enc.encode(v), clean), x)
    assert err < 1e-2


def test_drifting_field_cancels_on_identical_sets():
    rng = Rng(7)
    u = rng.normal((6,))
    members = rng.normal((5, 6))
    v = L.drifting_field(u, members, members.copy(), tau=0.7)
    np.testing.assert_array_equal(v, 0.0)


def test_drifting_field_single_members():
    u = np.zeros(3)
    p = np.array([[1.0, 0.0, 0.0]])
    n = np.array([[0.0, 2.0, 0.0]])
    v = L.drifting_field(u, p, n, tau=1.0)
    np.testing.assert_allclose(v, p[0] - n[0], atol=1e-12)


def test_drifting_field_matches_oracle():
    rng = Rng(8)
    for trial in range(50):
        r = rng.child(f"t{trial}")
        f = 2 + int(r.uniform(()) * 14)
        p_n = 1 + int(r.uniform(()) * 8)
        n_n = 1 + int(r.uniform(()) * 8)
        tau = 0.1 + 2 * float(r.uniform(()))
        u = r.normal((f,)).astype(np.float64)
        pos = r.normal((p_n, f)).astype(np.float64)
        neg = r.normal((n_n, f)).astype(np.float64)
        got = L.drifting_field(u, pos, neg, tau)
        want = oracle_drifting_field(u, pos, neg, tau)
        np.testing.assert_allclose(got, want, atol=1e-6)


def test_drifting_loss_value_and_gradient():
    rng = Rng(9)
    b, f = 6, 8
    u = Tensor(rng.normal((b, f)), requires_grad=True)
    pos = rng.normal((12, f)).astype(np.float64)
    neg = u.data.astype(np.float64)
    loss = L.drifting_loss(u, pos, neg, tau=0.5)

    field = np.stack([L.drifting_field(u.data[i], pos, neg, 0.5) for i in range(b)])
    assert loss.item() == pytest.approx(np.mean(np.sum(field ** 2, axis=1)), rel=1e-5)

    loss.backward()
    expected = -2.0 * field / b
    np.testing.assert_allclose(u.grad, expected, rtol=1e-4, atol=1e-7)


def test_drifting_loss_zero_field():
    u = Tensor(np.zeros((2, 3), dtype=np.float32), requires_grad=True)
    members = np.zeros((4, 3))
    loss = L.drifting_loss(u, members, members, tau=1.0)
    assert loss.item() == 0.0
    loss.backward()
    np.testing.assert_array_equal(u.grad, 0.0)


def test_hybrid_gate_values():
    u = np.zeros(4)
    assert L.hybrid_gate(u, u, 10.0) == 1.0
    # squared distance equal to the temperature -> exp(-1)
    t = np.zeros(4)
    t[0] = np.sqrt(10.0)
    assert L.hybrid_gate(u, t, 10.0) == pytest.approx(np.exp(-1.0), rel=1e-9)
    # monotone decreasing in distance
    prev = 1.0
    for d in (0.5, 1.0, 2.0, 4.0):
        t = np.zeros(4)
        t[0] = d
        s = L.hybrid_gate(u, t, 10.0)
        assert s < prev
        prev = s


def test_repulsion_weights_symmetry_and_sums():
    feats = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [5.0, 5.0]])
    ids = np.array([0, 0, 0, 1])
    w = L.repulsion_weights(feats, ids, 0, tau_rep=0.2)
    assert w[0] == 0.0 and w[3] == 0.0
    assert w[1] == pytest.approx(0.5) and w[2] == pytest.approx(0.5)
    assert w.sum() == pytest.approx(1.0, abs=1e-6)


def test_repulsion_weights_empty_neighbors():
    feats = np.zeros((3, 2))
    ids = np.array([0, 1, 2])
    w = L.repulsion_weights(feats, ids, 1, tau_rep=0.2)
    np.testing.assert_array_equal(w, 0.0)


def test_hybrid_field_fixed_point_at_target():
    rng = Rng(10)
    feats = rng.normal((4, 6)).astype(np.float64)
    batch = L.hybrid_field(feats, feats.copy(), np.zeros(4, dtype=int),
                           L.LossWeights())
    np.testing.assert_array_equal(batch.gates, 1.0)
    np.testing.assert_allclose(batch.v_hyb, batch.v_pos, atol=1e-12)
    np.testing.assert_array_equal(batch.v_pos, 0.0)


def test_hybrid_field_single_sample_pure_attraction():
    feats = np.array([[1.0, 2.0]])
    targets = np.array([[2.0, 2.0]])
    batch = L.hybrid_field(feats, targets, np.array([0]), L.LossWeights())
    s = batch.gates[0]
    np.testing.assert_allclose(batch.v_hyb[0], s * (targets[0] - feats[0]))
    np.testing.assert_array_equal(batch.v_neg, 0.0)


def test_hybrid_field_matches_oracle():
    rng = Rng(11)
    w = L.LossWeights(tau_rep=0.2, tau_gate=10.0)
    for trial in range(50):
        r = rng.child(f"h{trial}")
        b = 2 + int(r.uniform(()) * 14)
        f = 2 + int(r.uniform(()) * 14)
        feats = r.normal((b, f)).astype(np.float64)
        targets = r.normal((b, f)).astype(np.float64)
        ids = r.integers(0, 3, (b,))
        batch = L.hybrid_field(feats, targets, ids, w)
        want = oracle_hybrid_field(feats, targets, ids, w)
        np.testing.assert_allclose(batch.v_hyb, want, atol=1e-6)
        # row-stochastic where a same-class neighbor exists
        for i in range(b):
            has_neighbor = np.any((ids == ids[i]) & (np.arange(b) != i))
            if has_neighbor:
                assert batch.alphas[i].sum() == pytest.approx(1.0, abs=1e-6)
            else:
                assert batch.alphas[i].sum() == 0.0


def test_hybrid_field_gate_limits():
    w = L.LossWeights(tau_gate=1.0)
    base = np.zeros((2, 4))
    near = base.copy()
    ids = np.zeros(2, dtype=int)
    # far from target: repulsion dominates, V_hyb -> -V-
    far_targets = np.full((2, 4), 50.0)
    batch = L.hybrid_field(np.array([[0.0] * 4, [0.5] * 4]), far_targets, ids, w)
    np.testing.assert_allclose(batch.v_hyb, -batch.v_neg, atol=1e-8)
    # at the target: pure attraction
    batch2 = L.hybrid_field(near, base.copy(), ids, w)
    np.testing.assert_allclose(batch2.v_hyb, batch2.v_pos, atol=1e-12)


def test_hybrid_loss_value_and_gradient():
    rng = Rng(12)
    w = L.LossWeights(lambda_hyb=10.0)
    b, f = 5, 6
    u = Tensor(rng.normal((b, f)), requires_grad=True)
    targets = rng.normal((b, f))
    ids = np.array([0, 0, 1, 1, 1])
    loss, batch = L.hybrid_loss(u, targets, ids, w)
    assert loss.item() == pytest.approx(
        10.0 * np.mean(np.sum(batch.v_hyb ** 2, axis=1)), rel=1e-5)
    loss.backward()
    expected = -2.0 * 10.0 * batch.v_hyb / b
    np.testing.assert_allclose(u.grad, expected, rtol=1e-4, atol=1e-6)


def test_hybrid_loss_scalar_gate_mode():
    rng = Rng(13)
    w = L.LossWeights()
    u = Tensor(rng.normal((4, 6)))
    targets = rng.normal((4, 6))
    ids = np.zeros(4, dtype=int)
    _, batch = L.hybrid_loss(u, targets, ids, w, scalar_gate=0.9)
    np.testing.assert_array_equal(batch.gates, 0.9)
    want = oracle_hybrid_field(u.data.astype(np.float64),
                               targets.astype(np.float64), ids, w, scalar_gate=0.9)
    np.testing.assert_allclose(batch.v_hyb, want, atol=1e-6)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(tau_gate=0.0)
    with pytest.raises(ValueError):
        L.LossWeights(lambda_d=-0.1)
