import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyngs.cloud import assemble_covariance
from dyngs.geometry import make_circular_geometry, view_pose
from dyngs.phantom import BlobPhantom, analytic_project
from dyngs.splatting import (LOWPASS, NumericDomainError, integration_factor, project_gaussian, project_gaussians,
                             render, render_backward, render_naive)

from .conftest import rel_err


def _random_scene(rng, n, spread=12.0, sig=(3.0, 6.0)):
    q = rng.normal(size=(n, 4))
    covs = assemble_covariance(q, np.log(rng.uniform(*sig, (n, 3))))
    return rng.uniform(0.1, 1.0, n), rng.uniform(-spread, spread, (n, 3)), covs


def test_integration_factor_diagonal():
    assert integration_factor(np.eye(3)) == pytest.approx(2.5066282746, rel=1e-10)
    assert integration_factor(np.diag([2.0, 5.0, 7.0])) == pytest.approx(np.sqrt(2 * np.pi * 7.0))


def test_integration_factor_rotation_about_ray():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 3))
    cov = m @ m.T + np.eye(3)
    for a in np.linspace(0, 3, 5):
        rz = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
        assert integration_factor(rz @ cov @ rz.T) == pytest.approx(integration_factor(cov), rel=1e-12)


def test_integration_factor_quadrature():
    rng = np.random.default_rng(1)
    for _ in range(5):
        m = rng.normal(size=(3, 3))
        cov = m @ m.T + 0.5 * np.eye(3)
        q = np.linalg.inv(cov)[2, 2]
        s = np.linspace(-80, 80, 400001)
        f = np.exp(-0.5 * q * s**2)
        quad = (s[1] - s[0]) * (f.sum() - 0.5 * (f[0] + f[-1]))
        assert abs(integration_factor(cov) - quad) / quad <= 1e-6


def test_integration_factor_rejects_indefinite():
    with pytest.raises(NumericDomainError):
        integration_factor(np.diag([1.0, -1.0, 1.0]))


def test_isotropic_footprint_at_isocenter(clinical_geom):
    sp = project_gaussian(view_pose(clinical_geom, 0), clinical_geom, np.zeros(3), 25.0 * np.eye(3), 1.0, lowpass=0.0)
    np.testing.assert_allclose(np.sqrt(np.diag(sp.cov)), [9.6, 9.6], rtol=1e-12)
    assert sp.cov[0, 1] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(sp.center, clinical_geom.principal_point)


def test_lowpass_floor_added(clinical_geom):
    pose = view_pose(clinical_geom, 3)
    a = project_gaussian(pose, clinical_geom, np.zeros(3), 4.0 * np.eye(3), 1.0, lowpass=0.0)
    b = project_gaussian(pose, clinical_geom, np.zeros(3), 4.0 * np.eye(3), 1.0)
    np.testing.assert_allclose(b.cov - a.cov, LOWPASS * np.eye(2), atol=1e-12)


def test_isotropic_amplitude_is_view_independent(clinical_geom):
    sigma = 3.5
    for i, mu in [(0, [0, 0, 0]), (101, [40.0, -20.0, 15.0]), (250, [-60.0, 10.0, -30.0])]:
        pose = view_pose(clinical_geom, i)
        sp = project_gaussian(pose, clinical_geom, np.array(mu, float), sigma**2 * np.eye(3), 2.0)
        assert sp.amplitude / 2.0 == pytest.approx(sigma * np.sqrt(2 * np.pi), rel=1e-12)


def test_behind_source_is_culled(clinical_geom):
    pose = view_pose(clinical_geom, 0)
    assert project_gaussian(pose, clinical_geom, np.array([-1200.0, 0, 0]), np.eye(3), 1.0) is None


def test_off_detector_is_culled(small_geom):
    pose = view_pose(small_geom, 0)
    assert project_gaussian(pose, small_geom, np.array([0.0, 900.0, 0.0]), np.eye(3), 1.0) is None


def test_bbox_covers_three_sigma(clinical_geom):
    pose = view_pose(clinical_geom, 20)
    cov = assemble_covariance([0.9, 0.2, -0.3, 0.1], np.log([2.0, 5.0, 3.0]))
    sp = project_gaussian(pose, clinical_geom, np.array([5.0, 10.0, -8.0]), cov, 1.0)
    lam = np.linalg.eigvalsh(sp.cov)
    assert np.all(lam > 0)
    # the 3-sigma ellipse's axis-aligned extent fits in the box
    half = 3.0 * np.sqrt(np.diag(sp.cov))
    u0, u1, v0, v1 = sp.bbox
    assert u0 <= sp.center[0] - half[0] + 1 and u1 >= sp.center[0] + half[0] - 1
    assert v0 <= sp.center[1] - half[1] + 1 and v1 >= sp.center[1] + half[1] - 1


def test_empty_snapshot_renders_zero(small_geom):
    img = render((np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3, 3))), view_pose(small_geom, 0), small_geom)
    assert img.shape == (32, 32) and not img.any()


def test_render_matches_analytic_projection(clinical_geom):
    rng = np.random.default_rng(11)
    for _ in range(6):
        sigma = rng.uniform(2.0, 10.0)
        mu = rng.uniform(-50, 50, 3)
        pose = view_pose(clinical_geom, int(rng.integers(310)))
        ref = analytic_project(BlobPhantom([1.0], mu[None], sigma**2 * np.eye(3)[None]), pose, clinical_geom)
        img = render((np.array([1.0]), mu[None], sigma**2 * np.eye(3)[None]), pose, clinical_geom)
        assert np.abs(img - ref).max() <= 0.02 * ref.max()


def test_isocenter_kernel_matches_analytic(clinical_geom):
    pose = view_pose(clinical_geom, 0)
    cov = 25.0 * np.eye(3)[None]
    ref = analytic_project(BlobPhantom([1.0], np.zeros((1, 3)), cov), pose, clinical_geom)
    img = render((np.array([1.0]), np.zeros((1, 3)), cov), pose, clinical_geom)
    assert np.abs(img - ref).max() <= 0.02 * ref.max()


def test_union_is_sum(small_geom):
    rng = np.random.default_rng(2)
    a = _random_scene(rng, 6)
    b = _random_scene(rng, 5)
    both = tuple(np.concatenate([x, y]) for x, y in zip(a, b))
    pose = view_pose(small_geom, 2)
    np.testing.assert_allclose(render(both, pose, small_geom), render(a, pose, small_geom)
                               + render(b, pose, small_geom), rtol=1e-13, atol=1e-15)


@given(st.floats(0.01, 100.0), st.integers(0, 7))
def test_linear_in_density(alpha, view):
    geom = make_circular_geometry(1000.0, 1536.0, 8, (32, 32), 3.2)
    rho, mu, covs = _random_scene(np.random.default_rng(view), 8)
    pose = view_pose(geom, view)
    ref = render((rho, mu, covs), pose, geom)
    got = render((alpha * rho, mu, covs), pose, geom)
    np.testing.assert_allclose(got, alpha * ref, rtol=1e-12, atol=1e-300)
    assert np.all(ref >= 0)


def test_tiled_equals_naive(clinical_geom):
    rng = np.random.default_rng(4)
    rho, mu, covs = _random_scene(rng, 300, spread=90.0, sig=(1.0, 12.0))
    for i in (0, 77, 200):
        pose = view_pose(clinical_geom, i)
        np.testing.assert_array_equal(render((rho, mu, covs), pose, clinical_geom),
                                      render_naive((rho, mu, covs), pose, clinical_geom))


def test_zero_upstream_gives_zero_gradients(small_geom):
    scene = _random_scene(np.random.default_rng(5), 4)
    g = render_backward(scene, view_pose(small_geom, 1), small_geom, np.zeros((32, 32)))
    assert not g.density.any() and not g.means.any() and not g.covs.any()


def test_density_gradient_is_unit_render(small_geom):
    rho, mu, covs = _random_scene(np.random.default_rng(6), 5)
    pose = view_pose(small_geom, 4)
    w = np.random.default_rng(7).normal(size=(32, 32))
    g = render_backward((rho, mu, covs), pose, small_geom, w)
    for n in range(5):
        unit = render((np.ones(1), mu[n:n + 1], covs[n:n + 1]), pose, small_geom)
        assert g.density[n] == pytest.approx(np.sum(w * unit), rel=1e-12)


def _fd_scene_check(geom, rho, mu, covs, pose, w, step=1e-5):
    lin = mu.copy()

    def loss():
        return float(np.sum(w * render((rho, mu, covs), pose, geom, linearize_at=lin)))

    g = render_backward((rho, mu, covs), pose, geom, w, linearize_at=lin)
    worst = 0.0
    for arr, grad in ((rho, g.density), (mu, g.means)):
        fd = np.zeros(arr.size)
        flat = arr.reshape(-1)
        for i in range(arr.size):
            k = flat[i]
            flat[i] = k + step
            lp = loss()
            flat[i] = k - step
            lm = loss()
            flat[i] = k
            fd[i] = (lp - lm) / (2 * step)
        worst = max(worst, rel_err(grad.reshape(-1), fd))
    # symmetric perturbations of each covariance
    fd_c, an_c = [], []
    for n in range(len(rho)):
        for i, j in [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]:
            e = np.zeros((3, 3))
            e[i, j] = e[j, i] = step
            keep = covs[n].copy()
            covs[n] = keep + e
            lp = loss()
            covs[n] = keep - e
            lm = loss()
            covs[n] = keep
            fd_c.append((lp - lm) / (2 * step))
            an_c.append(g.covs[n, i, j] * (1 if i == j else 2))
    return max(worst, rel_err(np.array(an_c), np.array(fd_c)))


def test_single_kernel_gradients(small_geom):
    rng = np.random.default_rng(8)
    rho, mu, covs = _random_scene(rng, 1, spread=5.0)
    w = rng.normal(size=(32, 32))
    assert _fd_scene_check(small_geom, rho, mu, covs, view_pose(small_geom, 1), w) <= 1e-4


def test_random_scene_gradients(small_geom):
    rng = np.random.default_rng(9)
    for _ in range(5):
        rho, mu, covs = _random_scene(rng, 10)
        pose = view_pose(small_geom, int(rng.integers(8)))
        w = rng.normal(size=(32, 32))
        assert _fd_scene_check(small_geom, rho, mu, covs, pose, w) <= 1e-4


def test_gradients_are_symmetric(small_geom):
    scene = _random_scene(np.random.default_rng(10), 6)
    g = render_backward(scene, view_pose(small_geom, 0), small_geom, np.ones((32, 32)))
    np.testing.assert_array_equal(g.covs, np.swapaxes(g.covs, -1, -2))


def test_projection_batch_matches_single(clinical_geom):
    rho, mu, covs = _random_scene(np.random.default_rng(12), 4)
    pose = view_pose(clinical_geom, 9)
    sp = project_gaussians(pose, clinical_geom, mu, covs, rho)
    for n in range(4):
        one = project_gaussian(pose, clinical_geom, mu[n], covs[n], rho[n])
        np.testing.assert_allclose(one.center, sp.means2d[n], rtol=1e-14)
        assert one.amplitude == pytest.approx(sp.amp[n], rel=1e-14)
