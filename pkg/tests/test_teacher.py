import numpy as np
import pytest

from vco import data as D
from vco import schedule as S
from vco import teacher as TE
from vco.rng import Rng
from vco.tensor import Tensor


@pytest.fixture(scope="module")
def dataset():
    return D.generate(D.DatasetSpec(n_classes=4, samples_per_class=32, seed=5))


@pytest.fixture(scope="module")
def encoder():
    return TE.TeacherEncoder(patch_size=4, in_channels=1, feature_dim=8, seed=42)


def test_zero_image_zero_features(encoder):
    out = encoder.encode(np.zeros((1, 1, 16, 16), dtype=np.float32))
    np.testing.assert_array_equal(out, 0.0)


def test_encode_deterministic(encoder, dataset):
    again = TE.TeacherEncoder(patch_size=4, in_channels=1, feature_dim=8, seed=42)
    a = encoder.encode(dataset.images[:4])
    b = again.encode(dataset.images[:4])
    assert np.array_equal(a, b)


def test_encode_locality(encoder):
    rng = Rng(1)
    img = rng.normal((1, 1, 16, 16))
    img2 = img.copy()
    img2[0, 0, 4:8, 8:12] += 1.0  # patch (row 1, col 2) -> token 6 on a 4x4 grid
    fa = encoder.encode(img)[0]
    fb = encoder.encode(img2)[0]
    diff = np.abs(fa - fb).sum(axis=1)
    assert diff[6] > 0
    changed = np.nonzero(diff)[0]
    assert list(changed) == [6]


def test_encode_rejects_indivisible(encoder):
    with pytest.raises(ValueError):
        encoder.encode(np.zeros((1, 1, 15, 16), dtype=np.float32))


def test_token_count_matches_patch_grid(encoder):
    assert encoder.token_count(16, 16) == 16
    assert encoder.token_count(8, 4) == 2


def test_fit_stats_normalizes(encoder, dataset):
    stats = TE.fit_stats(encoder, dataset.images)
    normed = TE.normalize(encoder.encode(dataset.images), stats)
    flat = normed.reshape(-1, 8)
    assert np.all(np.abs(flat.mean(axis=0)) < 1e-3)
    assert np.all((flat.std(axis=0) > 0.99) & (flat.std(axis=0) < 1.01))


def test_fit_stats_degenerate_floor(encoder):
    images = np.broadcast_to(np.full((1, 1, 16, 16), 0.25, dtype=np.float32),
                             (8, 1, 16, 16)).copy()
    stats = TE.fit_stats(encoder, images)
    np.testing.assert_array_equal(stats.std, np.float32(TE.STD_FLOOR))


def test_fit_stats_order_invariant(encoder, dataset):
    perm = Rng(3).permutation(len(dataset))
    s1 = TE.fit_stats(encoder, dataset.images)
    s2 = TE.fit_stats(encoder, dataset.images[perm])
    np.testing.assert_allclose(s1.mean, s2.mean, atol=1e-5)
    np.testing.assert_allclose(s1.std, s2.std, atol=1e-5)


def test_prepare_semantics_rms_matches_pixels(encoder, dataset):
    stats = TE.fit_stats(encoder, dataset.images)
    calib = TE.fit_calibration(encoder, dataset.images, stats)
    d = TE.prepare_semantics(encoder, stats, calib, dataset.images)
    assert S.rms(d) == pytest.approx(S.rms(dataset.images), rel=1e-3)


def test_prepare_semantics_passthrough_when_alpha_one(encoder, dataset):
    stats = TE.fit_stats(encoder, dataset.images)
    calib = S.Calibration(rms_pixels=1.0, rms_features=1.0)
    d = TE.prepare_semantics(encoder, stats, calib, dataset.images[:8])
    normed = TE.normalize(encoder.encode(dataset.images[:8]), stats)
    np.testing.assert_allclose(d, normed, atol=1e-6)


def test_normalize_invertible(encoder, dataset):
    stats = TE.fit_stats(encoder, dataset.images)
    feats = encoder.encode(dataset.images[:8])
    back = TE.denormalize(TE.normalize(feats, stats), stats)
    np.testing.assert_allclose(back, feats, atol=1e-6)


def test_gradient_flows_through_but_not_into_teacher(encoder):
    img = Tensor(Rng(4).normal((2, 1, 16, 16)), requires_grad=True)
    feats = encoder.encode(img)
    (feats * feats).sum().backward()
    assert img.grad is not None and np.abs(img.grad).sum() > 0
    # frozen weights never appear as trainable leaves
    assert not encoder.weights.flags.writeable


def test_weights_immutable(encoder):
    with pytest.raises(ValueError):
        encoder.weights[0, 0] = 1.0
