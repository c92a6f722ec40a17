import numpy as np
import pytest

from vco import model as M
from vco.rng import Rng
from vco.tensor import Tensor


def make_cond(b, class_ids=None, t=None, mask=M.MASK_NONE, sem=M.SEM_FEATURES):
    return M.Conditioning(
        t_pixel=np.full(b, 0.4) if t is None else t,
        class_ids=np.zeros(b, dtype=np.int64) if class_ids is None else class_ids,
        mask_types=np.full(b, mask, dtype=np.int64),
        semantic_modes=np.full(b, sem, dtype=np.int64),
    )


def random_inputs(cfg, b, seed=0):
    rng = Rng(seed)
    z_x = rng.normal((b, cfg.image_channels, cfg.image_height, cfg.image_width))
    z_d = rng.normal((b, cfg.n_tokens, cfg.feature_dim))
    return z_x, z_d


DUAL = M.ModelConfig(variant="dual_stream", depth=2, hidden=32, heads=4, repa_block_index=2)


def test_build_mask_none():
    m = M.build_mask(M.AttentionMaskSpec(2, 2, M.MASK_NONE))
    assert m.all()


def test_build_mask_semantic_to_pixel():
    m = M.build_mask(M.AttentionMaskSpec(2, 2, M.MASK_SEMANTIC_TO_PIXEL))
    expected = np.array([[1, 1, 0, 0],
                         [1, 1, 0, 0],
                         [1, 1, 1, 1],
                         [1, 1, 1, 1]], dtype=bool)
    assert np.array_equal(m, expected)


def test_build_mask_bidirectional():
    m = M.build_mask(M.AttentionMaskSpec(2, 2, M.MASK_BIDIRECTIONAL))
    expected = np.array([[1, 1, 0, 0],
                         [1, 1, 0, 0],
                         [0, 0, 1, 1],
                         [0, 0, 1, 1]], dtype=bool)
    assert np.array_equal(m, expected)


def test_build_mask_validates():
    with pytest.raises(ValueError):
        M.build_mask(M.AttentionMaskSpec(0, 2, M.MASK_NONE))


def test_structural_invariance_semantic_to_pixel():
    params = M.init_params(DUAL, Rng(1))
    z_x, z_d1 = random_inputs(DUAL, 3, seed=2)
    _, z_d2 = random_inputs(DUAL, 3, seed=3)
    cond = make_cond(3, class_ids=np.full(3, M.NULL_CLASS, dtype=np.int64),
                     mask=M.MASK_SEMANTIC_TO_PIXEL)
    out1 = M.forward(DUAL, params, z_x, z_d1, cond)
    out2 = M.forward(DUAL, params, z_x, z_d2, cond)
    np.testing.assert_array_equal(out1.pred_pixels.data, out2.pred_pixels.data)
    # reverse pathway stays open: semantic output tracks pixel input
    z_x2 = z_x + 0.5
    out3 = M.forward(DUAL, params, z_x2, z_d1, cond)
    assert np.abs(out3.pred_semantics.data - out1.pred_semantics.data).max() > 1e-4


def test_structural_invariance_bidirectional():
    params = M.init_params(DUAL, Rng(1))
    z_x, z_d1 = random_inputs(DUAL, 2, seed=4)
    z_x2, z_d2 = random_inputs(DUAL, 2, seed=5)
    cond = make_cond(2, class_ids=np.full(2, M.NULL_CLASS, dtype=np.int64),
                     mask=M.MASK_BIDIRECTIONAL)
    a = M.forward(DUAL, params, z_x, z_d1, cond)
    b = M.forward(DUAL, params, z_x, z_d2, cond)
    c = M.forward(DUAL, params, z_x2, z_d1, cond)
    np.testing.assert_array_equal(a.pred_pixels.data, b.pred_pixels.data)
    np.testing.assert_array_equal(a.pred_semantics.data, c.pred_semantics.data)


def test_no_mask_gives_sensitivity():
    params = M.init_params(DUAL, Rng(1))
    z_x, z_d1 = random_inputs(DUAL, 2, seed=6)
    _, z_d2 = random_inputs(DUAL, 2, seed=7)
    cond = make_cond(2)
    a = M.forward(DUAL, params, z_x, z_d1, cond)
    b = M.forward(DUAL, params, z_x, z_d2, cond)
    assert np.abs(a.pred_pixels.data - b.pred_pixels.data).max() > 1e-5


def test_token_concat_masked_invariance():
    cfg = M.ModelConfig(variant="single_token_concat", depth=2, hidden=32,
                        heads=4, feature_specific_blocks=0, repa_block_index=2)
    params = M.init_params(cfg, Rng(2))
    z_x, z_d1 = random_inputs(cfg, 2, seed=8)
    z_x2, z_d2 = random_inputs(cfg, 2, seed=9)
    cond = make_cond(2, class_ids=np.full(2, M.NULL_CLASS, dtype=np.int64),
                     mask=M.MASK_BIDIRECTIONAL)
    a = M.forward(cfg, params, z_x, z_d1, cond)
    b = M.forward(cfg, params, z_x, z_d2, cond)
    c = M.forward(cfg, params, z_x2, z_d1, cond)
    # tokens stay separate through the 2n-length shared sequence
    np.testing.assert_array_equal(a.pred_pixels.data, b.pred_pixels.data)
    np.testing.assert_array_equal(a.pred_semantics.data, c.pred_semantics.data)


def test_depth_zero_degenerate():
    cfg = M.ModelConfig(variant="dual_stream", depth=0, hidden=32, heads=4)
    params = M.init_params(cfg, Rng(3))
    z_x, z_d1 = random_inputs(cfg, 2, seed=10)
    _, z_d2 = random_inputs(cfg, 2, seed=11)
    a = M.forward(cfg, params, z_x, z_d1, make_cond(2))
    b = M.forward(cfg, params, z_x, z_d2, make_cond(2))
    np.testing.assert_array_equal(a.pred_pixels.data, b.pred_pixels.data)
    assert a.pred_pixels.shape == z_x.shape


def test_direct_add_zero_semantic_projection():
    cfg = M.ModelConfig(variant="single_direct_add", depth=2, hidden=32,
                        heads=4, feature_specific_blocks=0, repa_block_index=2)
    params = M.init_params(cfg, Rng(4))
    for name in ("semantic.embed.w", "semantic.embed.b", "semantic.pos"):
        params[name] = Tensor(np.zeros(params[name].shape, dtype=np.float32),
                              requires_grad=True)
    z_x, z_d1 = random_inputs(cfg, 2, seed=12)
    _, z_d2 = random_inputs(cfg, 2, seed=13)
    a = M.forward(cfg, params, z_x, z_d1, make_cond(2))
    b = M.forward(cfg, params, z_x, z_d2, make_cond(2))
    np.testing.assert_array_equal(a.pred_pixels.data, b.pred_pixels.data)


def test_channel_concat_fuse_width():
    cfg = M.ModelConfig(variant="single_channel_concat", depth=2, hidden=32,
                        heads=4, feature_specific_blocks=1, repa_block_index=2)
    params = M.init_params(cfg, Rng(5))
    assert params["shared.fuse.w"].shape == (64, 32)
    z_x, z_d = random_inputs(cfg, 2, seed=14)
    out = M.forward(cfg, params, z_x, z_d, make_cond(2))
    assert out.pred_pixels.shape == z_x.shape
    assert out.pred_semantics.shape == z_d.shape
    assert len(out.hidden_pixel) == cfg.depth


def test_mask_rejected_without_joint_attention():
    cfg = M.ModelConfig(variant="single_direct_add", depth=1, hidden=32, heads=4, repa_block_index=1)
    params = M.init_params(cfg, Rng(6))
    z_x, z_d = random_inputs(cfg, 2, seed=15)
    cond = make_cond(2, mask=M.MASK_SEMANTIC_TO_PIXEL)
    with pytest.raises(ValueError):
        M.forward(cfg, params, z_x, z_d, cond)


def test_semantic_token_count_mismatch():
    params = M.init_params(DUAL, Rng(1))
    z_x, _ = random_inputs(DUAL, 2)
    bad_d = np.zeros((2, 5, DUAL.feature_dim), dtype=np.float32)
    with pytest.raises(ValueError):
        M.forward(DUAL, params, z_x, bad_d, make_cond(2))


def test_dual_has_more_params_than_token_concat():
    dual = M.ModelConfig(variant="dual_stream", depth=4, hidden=64, heads=4)
    tc = M.ModelConfig(variant="single_token_concat", depth=4, hidden=64,
                       heads=4, feature_specific_blocks=0)
    n_dual = M.count_params(M.init_params(dual, Rng(0)))
    n_tc = M.count_params(M.init_params(tc, Rng(0)))
    assert n_dual > n_tc


def test_conditioning_embedding_determinism_and_null():
    params = M.init_params(DUAL, Rng(7))
    t = np.array([0.3, 0.3])
    ids = np.array([1, 1], dtype=np.int64)
    a = M.embed_conditioning(params, t, ids, DUAL.n_classes, DUAL.hidden)
    b = M.embed_conditioning(params, t, ids, DUAL.n_classes, DUAL.hidden)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(a.data[0], a.data[1])

    nulls = M.embed_conditioning(params, t, np.array([M.NULL_CLASS, M.NULL_CLASS]),
                                 DUAL.n_classes, DUAL.hidden)
    assert np.array_equal(nulls.data[0], nulls.data[1])
    assert not np.array_equal(nulls.data[0], a.data[0])


def test_time_embedding_distinguishes_times():
    params = M.init_params(DUAL, Rng(7))
    ids = np.zeros(2, dtype=np.int64)
    e = M.embed_conditioning(params, np.array([0.1, 0.9]), ids,
                             DUAL.n_classes, DUAL.hidden)
    assert np.abs(e.data[0] - e.data[1]).max() > 1e-4


def test_class_id_out_of_range():
    params = M.init_params(DUAL, Rng(7))
    with pytest.raises(ValueError):
        M.embed_conditioning(params, np.array([0.5]), np.array([4]),
                             DUAL.n_classes, DUAL.hidden)


def test_pixel_only_forward():
    cfg = M.ModelConfig(variant="pixel_only", depth=2, hidden=32, heads=4, repa_block_index=2)
    params = M.init_params(cfg, Rng(8))
    assert not any(k.startswith("semantic.") for k in params)
    z_x, _ = random_inputs(cfg, 2, seed=16)
    out = M.forward(cfg, params, z_x, None, make_cond(2))
    assert out.pred_semantics is None
    assert out.pred_pixels.shape == z_x.shape


def test_gradient_reaches_every_parameter():
    cfg = M.ModelConfig(variant="dual_stream", depth=2, hidden=32, heads=4, repa_block_index=2)
    params = M.init_params(cfg, Rng(9))
    b = 8
    z_x = Tensor(Rng(10).normal((b, 1, 16, 16)))
    z_d = Tensor(Rng(11).normal((b, cfg.n_tokens, cfg.feature_dim)))
    cond = M.Conditioning(
        t_pixel=np.linspace(0.1, 0.9, b),
        class_ids=np.array([0, 1, 2, 3, M.NULL_CLASS, 0, 1, 2], dtype=np.int64),
        mask_types=np.array([0, 0, 1, 2, 1, 0, 0, 0], dtype=np.int64),
        semantic_modes=np.array([0, 0, 0, 0, 0, 1, 2, 0], dtype=np.int64),
    )
    out = M.forward(cfg, params, z_x, z_d, cond)
    loss = (out.pred_pixels * out.pred_pixels).sum() + \
           (out.pred_semantics * out.pred_semantics).sum()
    loss.backward()
    dead = [k for k, p in params.items()
            if p.grad is None or not np.any(p.grad)]
    assert not dead, f"parameters with no gradient: {dead}"


def test_forward_deterministic():
    params = M.init_params(DUAL, Rng(1))
    z_x, z_d = random_inputs(DUAL, 2, seed=17)
    a = M.forward(DUAL, params, z_x, z_d, make_cond(2))
    b = M.forward(DUAL, params, z_x, z_d, make_cond(2))
    assert np.array_equal(a.pred_pixels.data, b.pred_pixels.data)
    assert np.array_equal(a.pred_semantics.data, b.pred_semantics.data)


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(hidden=30, heads=4)
    with pytest.raises(ValueError):
        M.ModelConfig(variant="bogus")
    with pytest.raises(ValueError):
        M.ModelConfig(variant="single_token_concat", depth=2,
                      feature_specific_blocks=3, repa_block_index=2)
    with pytest.raises(ValueError):
        M.ModelConfig(depth=4, repa_block_index=5)
