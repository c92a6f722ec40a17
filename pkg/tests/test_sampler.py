import numpy as np
import pytest

from vco import model as M
from vco import sampler as SM
from vco.rng import Rng


CFG = M.ModelConfig(variant="dual_stream", depth=2, hidden=32, heads=4,
                    repa_block_index=2)


def test_guidance_combine_degenerate_scales():
    v_c = np.full((2, 3), 3.0)
    v_u = np.full((2, 3), 1.0)
    np.testing.assert_array_equal(SM.guidance_combine(v_c, v_u, 1.0), v_c)
    np.testing.assert_array_equal(SM.guidance_combine(v_c, v_u, 0.0), v_u)
    np.testing.assert_allclose(SM.guidance_combine(v_c, v_u, 2.0), 5.0)


def test_guidance_combine_shape_check():
    with pytest.raises(ValueError):
        SM.guidance_combine(np.zeros(3), np.zeros(4), 1.0)


def test_heun_exact_for_constant_field():
    c = np.array([0.7, -0.3])

    def field(state, t):
        return (np.broadcast_to(c, state[0].shape),)

    z0 = np.array([1.0, 2.0])
    (out,) = SM.heun_path(field, (z0,), np.array([0.0, 1.0]))
    np.testing.assert_allclose(out, z0 + c, atol=1e-12)


def closed_form_error(steps):
    def field(state, t):
        return (-state[0],)

    z0 = np.array([1.0])
    grid = np.linspace(0.0, 1.0, steps + 1)
    (out,) = SM.heun_path(field, (z0,), grid)
    exact = np.exp(-1.0) * z0
    return float(np.abs(out - exact) / np.abs(exact))


def test_heun_decay_field_accuracy():
    assert closed_form_error(50) < 1e-3


def test_heun_second_order_convergence():
    e1 = closed_form_error(50)
    e2 = closed_form_error(100)
    order = np.log2(e1 / e2)
    assert 1.8 <= order <= 2.2


def test_heun_divergence_detection():
    def field(state, t):
        return (state[0] * 1e30,)

    with np.errstate(over="ignore"), pytest.raises(SM.DivergenceError):
        SM.heun_path(field, (np.array([1.0]),), np.linspace(0, 1, 51))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SM.SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SM.SamplerConfig(uncond_type="bogus")
    with pytest.raises(ValueError):
        SM.SamplerConfig(cfg_interval=(0.5, 0.5))
    with pytest.raises(ValueError):
        SM.SamplerConfig(cfg_scale=-1.0)


def test_cfg_scale_one_equals_conditional_only():
    params = M.init_params(CFG, Rng(0))
    ids = np.array([0, 1], dtype=np.int64)
    a = SM.heun_integrate(CFG, params, Rng(42).child("s"), ids,
                          SM.SamplerConfig(steps=4, cfg_scale=1.0))
    b = SM.heun_integrate(CFG, params, Rng(42).child("s"), ids,
                          SM.SamplerConfig(steps=4, cfg_scale=1.0,
                                           cfg_interval=(0.1, 1.0)))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_sampling_deterministic():
    params = M.init_params(CFG, Rng(0))
    ids = np.array([0, 1], dtype=np.int64)
    cfg = SM.SamplerConfig(steps=4, cfg_scale=2.0)
    a = SM.heun_integrate(CFG, params, Rng(7).child("s"), ids, cfg)
    b = SM.heun_integrate(CFG, params, Rng(7).child("s"), ids, cfg)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])


def test_guidance_outside_interval_is_conditional():
    params = M.init_params(CFG, Rng(0))
    rng = Rng(3)
    z_x = rng.normal((2, 1, 16, 16))
    z_d = rng.normal((2, CFG.n_tokens, CFG.feature_dim))
    ids = np.array([0, 1], dtype=np.int64)
    guided = SM.predict_velocity(
        CFG, params, z_x, z_d, 0.05, ids,
        SM.SamplerConfig(cfg_scale=3.0, cfg_interval=(0.1, 1.0)))
    plain = SM.predict_velocity(
        CFG, params, z_x, z_d, 0.05, ids, SM.SamplerConfig(cfg_scale=1.0))
    np.testing.assert_array_equal(guided.v_x, plain.v_x)
    np.testing.assert_array_equal(guided.v_d, plain.v_d)


def test_unconditional_pass_mask_invariance():
    """With the semantic-to-pixel mask, the unconditional pixel velocity is
    invariant to the semantic input."""
    params = M.init_params(CFG, Rng(0))
    rng = Rng(4)
    z_x = rng.normal((2, 1, 16, 16))
    z_d1 = rng.normal((2, CFG.n_tokens, CFG.feature_dim))
    z_d2 = rng.normal((2, CFG.n_tokens, CFG.feature_dim))
    ids = np.array([0, 1], dtype=np.int64)
    cfg = SM.SamplerConfig(cfg_scale=2.0, uncond_type="semantic_to_pixel_mask")
    a = SM.predict_velocity(CFG, params, z_x, z_d1, 0.4, ids, cfg)
    b = SM.predict_velocity(CFG, params, z_x, z_d2, 0.4, ids, cfg)
    np.testing.assert_array_equal(a.v_x_uncond, b.v_x_uncond)
    # the conditional branch stays sensitive
    assert np.abs(a.v_x_cond - b.v_x_cond).max() > 1e-6


def test_pixel_only_sampling():
    cfg_m = M.ModelConfig(variant="pixel_only", depth=2, hidden=32, heads=4,
                          repa_block_index=2)
    params = M.init_params(cfg_m, Rng(1))
    imgs, feats = SM.heun_integrate(cfg_m, params, Rng(5).child("s"),
                                    np.array([0, 1, 2], dtype=np.int64),
                                    SM.SamplerConfig(steps=4, cfg_scale=2.0))
    assert imgs.shape == (3, 1, 16, 16)
    assert feats is None


def test_time_shift_alpha_changes_semantic_query():
    params = M.init_params(CFG, Rng(0))
    rng = Rng(6)
    z_x = rng.normal((1, 1, 16, 16))
    z_d = rng.normal((1, CFG.n_tokens, CFG.feature_dim))
    ids = np.array([0], dtype=np.int64)
    plain = SM.predict_velocity(CFG, params, z_x, z_d, 0.5, ids,
                                SM.SamplerConfig(cfg_scale=1.0))
    shifted = SM.predict_velocity(CFG, params, z_x, z_d, 0.5, ids,
                                  SM.SamplerConfig(cfg_scale=1.0, time_shift_alpha=2.0))
    assert np.abs(plain.v_d - shifted.v_d).max() > 1e-6
