import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyngs.cloud import GaussianCloud
from dyngs.ffd import FFDMotionModel, TemporalSpline, lattice_eval, lattice_for_fov
from dyngs.selftest import check_gradients
from dyngs.warp import MotionMode, StaleCacheError, warp, warp_backward, warp_decoupled, warp_di, warp_per_gaussian


def _cloud(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return GaussianCloud(rng.normal(size=n), rng.uniform(-15, 15, (n, 3)), rng.normal(size=(n, 4)),
                         np.log(rng.uniform(1, 4, (n, 3))))


def _affine_model(a, channels=3):
    """Rank-1 model with w(t) = 1 whose displacement is ``(A - I) x``."""
    lat = lattice_for_fov([-30.0] * 3, [30.0] * 3, 12.8, 1, channels)
    lat.coeffs[0, ..., :3] = lat.control_points() @ (np.asarray(a) - np.eye(3)).T
    return FFDMotionModel(lat, TemporalSpline(np.ones((1, 8)), 10))


def _rot(angle, axis):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k


def test_zero_model_is_identity():
    c = _cloud()
    model = _affine_model(np.eye(3))
    snap = warp_di(c, model, 2)
    np.testing.assert_allclose(snap.means, c.means, atol=1e-13)
    np.testing.assert_allclose(snap.covs, c.covariances(), atol=1e-13)


def test_rigid_rotation():
    c = _cloud()
    r = _rot(0.3, [1.0, 2.0, -0.5])
    snap = warp_di(c, _affine_model(r), 4)
    cov0 = c.covariances()
    np.testing.assert_allclose(snap.means, c.means @ r.T, atol=1e-10)
    np.testing.assert_allclose(snap.covs, r @ cov0 @ r.T, atol=1e-8)
    np.testing.assert_allclose(np.linalg.det(snap.covs), np.linalg.det(cov0), rtol=1e-8)


def test_isotropic_scaling():
    c = _cloud()
    snap = warp_di(c, _affine_model(1.2 * np.eye(3)), 0)
    ratio = np.linalg.det(snap.covs) / np.linalg.det(c.covariances())
    np.testing.assert_allclose(ratio, 1.2**6, rtol=1e-6)


@given(st.lists(st.floats(-0.3, 0.3), min_size=9, max_size=9))
def test_affine_precision(entries):
    a = np.eye(3) + np.reshape(entries, (3, 3))
    c = _cloud(seed=1)
    snap = warp_di(c, _affine_model(a), 1)
    np.testing.assert_allclose(snap.means, c.means @ a.T, atol=1e-10)
    cov0 = c.covariances()
    np.testing.assert_allclose(snap.covs, snap.covs.transpose(0, 2, 1), atol=1e-12)
    if snap.folds == 0:
        np.testing.assert_allclose(snap.covs, a @ cov0 @ a.T, atol=1e-8)


def test_density_is_untouched():
    c = _cloud(seed=2)
    c.pg_weights = np.random.default_rng(3).normal(size=(len(c), 1, 10))
    m3 = _affine_model(_rot(0.2, [0, 0, 1]))
    m10 = _affine_model(_rot(0.2, [0, 0, 1]), channels=10)
    for mode, model in [(MotionMode.DI, m3), (MotionMode.DECOUPLED_FFD, m10), (MotionMode.PER_GAUSSIAN, m3)]:
        assert warp(c, model, 3, mode).density.tobytes() == c.density.tobytes()


def test_fold_is_floored_and_counted():
    c = _cloud(seed=4)
    snap = warp_di(c, _affine_model(np.diag([1.0, 1.0, -0.5])), 0)
    assert snap.folds == len(c)
    assert np.all(np.linalg.eigvalsh(snap.covs) > 0)


def test_decoupled_zero_extra_channels_keeps_shape():
    c = _cloud()
    model = _affine_model(_rot(0.4, [0, 1, 0]), channels=10)
    snap = warp_decoupled(c, model, 5)
    assert not np.allclose(snap.means, c.means)
    np.testing.assert_allclose(snap.covs, c.covariances(), atol=1e-12)


def test_decoupled_scale_channel_only():
    c = _cloud()
    model = _affine_model(np.eye(3), channels=10)
    model.lattice.coeffs[0, ..., 3:6] = [0.1, -0.2, 0.05]
    snap = warp_decoupled(c, model, 5)
    np.testing.assert_allclose(snap.means, c.means, atol=1e-12)
    assert not np.allclose(snap.covs, c.covariances())
    np.testing.assert_allclose(np.exp(snap.cache["s_t"] - c.log_scales),
                               np.broadcast_to(np.exp([0.1, -0.2, 0.05]), (len(c), 3)), rtol=1e-12)


def test_decoupled_needs_extra_channels():
    with pytest.raises(ValueError):
        warp_decoupled(_cloud(), _affine_model(np.eye(3)), 0)


def test_per_gaussian_needs_weights():
    with pytest.raises(ValueError):
        warp_per_gaussian(_cloud(), TemporalSpline.zeros(1, 10), 0)


def test_per_gaussian_zero_and_shared_weights():
    c = _cloud()
    temporal = TemporalSpline(np.ones((1, 8)), 10)
    c.pg_weights = np.zeros((len(c), 1, 10))
    snap = warp_per_gaussian(c, temporal, 3)
    np.testing.assert_array_equal(snap.means, c.means)
    np.testing.assert_allclose(snap.covs, c.covariances(), rtol=1e-14)
    c.pg_weights[:] = np.array([1.0, -2.0, 0.5] + [0.0] * 7)
    snap = warp_per_gaussian(c, temporal, 3)
    np.testing.assert_allclose(snap.means - c.means, np.broadcast_to([1.0, -2.0, 0.5], (len(c), 3)), rtol=1e-14)


def test_per_gaussian_matches_decoupled():
    c = _cloud(seed=5)
    lat = lattice_for_fov([-30.0] * 3, [30.0] * 3, 12.8, 2, 10)
    lat.coeffs[:] = np.random.default_rng(6).normal(scale=0.1, size=lat.coeffs.shape)
    temporal = TemporalSpline.zeros(2, 10)
    temporal.controls[:] = np.random.default_rng(7).normal(size=temporal.controls.shape)
    model = FFDMotionModel(lat, temporal)
    c.pg_weights = lattice_eval(lat, c.means, order=0)[0]
    a = warp_decoupled(c, model, 6.5)
    b = warp_per_gaussian(c, temporal, 6.5)
    np.testing.assert_allclose(b.means, a.means, atol=1e-12)
    np.testing.assert_allclose(b.covs, a.covs, atol=1e-12)


def test_stale_cache():
    c = _cloud()
    model = _affine_model(np.eye(3))
    snap = warp_di(c, model, 0)
    c.means[0, 0] += 1.0
    with pytest.raises(StaleCacheError):
        warp_backward(snap, c, model, np.zeros((8, 3)), np.zeros((8, 3, 3)))


@pytest.mark.parametrize("mode", list(MotionMode))
def test_zero_upstream(mode):
    c = _cloud()
    c.pg_weights = np.random.default_rng(1).normal(size=(len(c), 1, 10))
    model = _affine_model(_rot(0.1, [1, 1, 0]), channels=10 if mode is MotionMode.DECOUPLED_FFD else 3)
    g = warp_backward(warp(c, model, 2, mode, for_backward=True), c, model, np.zeros((8, 3)), np.zeros((8, 3, 3)))
    for arr in (g.cloud.means, g.cloud.quats, g.cloud.log_scales, g.temporal):
        assert not arr.any()


def test_identity_motion_passes_mean_gradient():
    c = _cloud()
    model = _affine_model(np.eye(3))
    d_mu = np.random.default_rng(2).normal(size=(8, 3))
    g = warp_backward(warp_di(c, model, 0, for_backward=True), c, model, d_mu, np.zeros((8, 3, 3)))
    np.testing.assert_array_equal(g.cloud.means, d_mu)


@pytest.mark.parametrize("mode", list(MotionMode))
@pytest.mark.parametrize("seed", [0, 1])
def test_chain_gradients(mode, seed):
    worst = check_gradients(mode, seed=seed)
    assert max(worst.values()) <= 1e-4, worst
