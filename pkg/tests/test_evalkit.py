import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from dyngs.cloud import GaussianCloud, GridSpec
from dyngs.evalkit import (default_time_samples, dvf_error, evaluate_run, fov_mask, fov_radius, invert_displacement,
                           psnr, relative_dvf_error, rmse)
from dyngs.ffd import FFDMotionModel, TemporalSpline, displacement, lattice_for_fov
from dyngs.geometry import make_circular_geometry
from dyngs.phantom import desk_phantom, desk_truth_motion, make_dataset


def test_fov_radius(clinical_geom):
    assert fov_radius(clinical_geom) == pytest.approx((204.8 + 116.0) * 1000.0 / 1536.0)
    assert fov_radius(clinical_geom) == pytest.approx(208.85, abs=0.01)
    centered = make_circular_geometry(1000.0, 1500.0, 10, (100, 100), 1.0)
    assert fov_radius(centered) == pytest.approx(50.0 * 1000.0 / 1500.0)


def test_fov_mask_is_a_cylinder():
    geom = make_circular_geometry(1000.0, 1536.0, 10, (64, 64), 1.6)
    grid = GridSpec.centered(64, 1.6)
    m = fov_mask(geom, grid)
    np.testing.assert_array_equal(m.mask[..., 0], m.mask[..., -1])
    x, y, _ = grid.axes()
    assert m.mask[32, 32, 5] and not m.mask[0, 0, 5]
    assert np.hypot(x[0], y[0]) > m.radius


def test_rmse_examples():
    rng = np.random.default_rng(0)
    ref = rng.random((6, 6, 6))
    assert rmse(ref, ref) == 0.0
    assert rmse(ref + 0.25, ref) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        rmse(ref, ref[:5])
    with pytest.raises(ValueError):
        rmse(ref, ref, np.zeros(ref.shape, bool))


def test_psnr_examples():
    ref = np.zeros((4, 4, 4))
    ref[1, 1, 1] = 2.0
    assert psnr(ref + 0.2, ref) == pytest.approx(20.0)
    assert psnr(ref, ref) == float("inf")


def _translation(c, n_t=12):
    lat = lattice_for_fov([-40.0] * 3, [40.0] * 3, 12.8, 1)
    lat.coeffs[:] = c
    return FFDMotionModel(lat, TemporalSpline(np.ones((1, 6)), n_t))


def _identity(n_t=12):
    return _translation(0.0, n_t)


def test_dvf_error_examples():
    probes = np.random.default_rng(1).uniform(-20, 20, (30, 3))
    truth = _translation([1.0, 2.0, 2.0])
    assert not dvf_error(truth, truth, probes, 3).any()
    np.testing.assert_allclose(dvf_error(_identity(), truth, probes, 3), 3.0, rtol=1e-12)
    np.testing.assert_allclose(dvf_error(_identity(), lambda x: displacement(truth, x, 3), probes, 3), 3.0)


def test_inverse_displacement():
    model = desk_truth_motion(40, 10, seed=2).model
    x = np.random.default_rng(3).uniform(-30, 30, (20, 3))
    y = displacement(model, x, 17)
    np.testing.assert_allclose(invert_displacement(model, y, 17), x, atol=1e-8)


def test_relative_dvf_is_gauge_free():
    probes = np.random.default_rng(4).uniform(-20, 20, (15, 3))
    truth = _translation([1.0, -2.0, 3.0])
    truth.temporal.controls[:] = np.random.default_rng(5).normal(size=truth.temporal.controls.shape)
    # same motion, but with the reference configuration taken at t = 0
    fit = truth.copy()
    fit.temporal.controls -= truth.temporal.stencil(0)[1] @ truth.temporal.controls[0, :4]
    assert dvf_error(fit, truth, probes, 7).min() > 0.1
    assert relative_dvf_error(fit, truth, probes, 7).max() <= 1e-10


def test_time_samples():
    s = default_time_samples(60)
    assert len(s) == 10 and s[0] == 0 and s[-1] == 59
    trace = np.sin(np.linspace(0, 3, 60)) ** 2
    assert len(default_time_samples(60, trace=trace)) in (10, 11)


def test_truth_against_itself_scores_perfectly():
    geom = make_circular_geometry(1000.0, 1536.0, 20, (48, 48), 3.2)
    ph = desk_phantom(n_features=5, seed=6)
    tm = desk_truth_motion(20, 10, seed=6)
    _, truth = make_dataset(ph, tm, geom)
    grid = GridSpec.centered(24, 3.2)
    lam, vec = np.linalg.eigh(ph.covs)
    vec[np.linalg.det(vec) < 0, :, 0] *= -1
    xyzw = Rotation.from_matrix(vec).as_quat()
    cloud = GaussianCloud.from_activated(ph.density, ph.means, xyzw[:, [3, 0, 1, 2]], 0.5 * np.log(lam))
    report = evaluate_run(cloud, tm.model, "di", truth, grid, geom, [0, 7, 19])
    for row in report["per_time"]:
        assert row["rmse"] <= 1e-12
    assert report["dvf"]["max_mm"] <= 1e-8
