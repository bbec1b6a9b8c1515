import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyngs.geometry import (BehindSourceError, GeometryError, ScanGeometry, make_circular_geometry,
                            perspective_jacobian, pixel_rays, project_camera, project_point, view_pose,
                            world_to_camera)


def test_clinical_scan_is_valid(clinical_geom):
    assert clinical_geom.n_views == 310
    assert clinical_geom.focal == pytest.approx(1536.0 / 0.8)
    assert clinical_geom.magnification == pytest.approx(1.536)
    np.testing.assert_allclose(clinical_geom.angles, 2 * np.pi * np.arange(310) / 310)
    c_u, c_v = clinical_geom.principal_point
    assert c_u == pytest.approx(255.5 + 116.0 / 0.8)
    assert c_v == pytest.approx(255.5)


def test_single_view_sits_at_angle_zero():
    g = make_circular_geometry(1000, 1536, 1, (4, 4), 1.0)
    assert g.angles.tolist() == [0.0]
    np.testing.assert_allclose(view_pose(g, 0).source, [-1000, 0, 0])


@pytest.mark.parametrize("sid,sdd", [(1000, 1000), (1000, 900), (0, 10), (-5, 10)])
def test_invalid_distances(sid, sdd):
    with pytest.raises(GeometryError):
        make_circular_geometry(sid, sdd, 10, (8, 8), 1.0)


def test_invalid_counts_and_pitch():
    with pytest.raises(GeometryError):
        make_circular_geometry(1000, 1536, 0, (8, 8), 1.0)
    with pytest.raises(GeometryError):
        make_circular_geometry(1000, 1536, 4, (8, 8), 0.0)


def test_angles_must_increase():
    with pytest.raises(GeometryError):
        ScanGeometry(1000, 1536, 3, 8, 8, 1.0, angles=np.array([0.0, 0.2, 0.1]))


def test_view_index_range(clinical_geom):
    with pytest.raises(GeometryError):
        view_pose(clinical_geom, 310)
    with pytest.raises(GeometryError):
        view_pose(clinical_geom, -1)


def test_view_zero_convention(clinical_geom):
    pose = view_pose(clinical_geom, 0)
    np.testing.assert_allclose(pose.source, [-1000.0, 0.0, 0.0], atol=1e-12)
    # camera z points at the isocenter
    np.testing.assert_allclose(pose.rotation[2], [1.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(world_to_camera(pose, pose.source), 0.0, atol=1e-12)


def test_isocenter_maps_to_sid_depth(clinical_geom):
    for i in (0, 17, 155, 309):
        pose = view_pose(clinical_geom, i)
        np.testing.assert_allclose(world_to_camera(pose, np.zeros(3)), [0.0, 0.0, 1000.0], atol=1e-9)


def test_half_turn_negates_source():
    g = make_circular_geometry(1000, 1536, 10, (8, 8), 1.0)
    np.testing.assert_allclose(view_pose(g, 5).source, -view_pose(g, 0).source, atol=1e-9)


def test_rotation_is_orthonormal(clinical_geom):
    for i in range(0, 310, 31):
        r = view_pose(clinical_geom, i).rotation
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)


def test_isocenter_hits_principal_point(clinical_geom):
    u, v, d = project_point(view_pose(clinical_geom, 42), clinical_geom, np.zeros(3))
    assert (u, v) == pytest.approx(clinical_geom.principal_point)
    assert d == pytest.approx(1000.0)


def test_lateral_magnification(clinical_geom):
    pose = view_pose(clinical_geom, 0)
    delta = 2.5
    u0, _, _ = project_point(pose, clinical_geom, np.zeros(3))
    # camera x is world +y at view 0
    u1, _, _ = project_point(pose, clinical_geom, np.array([0.0, delta, 0.0]))
    assert u1 - u0 == pytest.approx(delta * 1.536 / 0.8, rel=1e-12)


def test_unit_magnification_at_detector_depth(clinical_geom):
    u, v, _ = project_camera(clinical_geom, np.array([3.2, -1.6, 1536.0]))
    c_u, c_v = clinical_geom.principal_point
    assert (u - c_u) * 0.8 == pytest.approx(3.2)
    assert (v - c_v) * 0.8 == pytest.approx(-1.6)


def test_behind_source_raises(clinical_geom):
    pose = view_pose(clinical_geom, 0)
    with pytest.raises(BehindSourceError):
        project_point(pose, clinical_geom, np.array([-1000.5, 0.0, 0.0]))
    with pytest.raises(BehindSourceError):
        perspective_jacobian(pose, clinical_geom, np.array([0.0, 0.0, 0.5]))


def test_on_axis_jacobian(clinical_geom):
    f = clinical_geom.focal
    j = perspective_jacobian(None, clinical_geom, np.array([0.0, 0.0, 800.0]))
    np.testing.assert_allclose(j, np.diag([f / 800, f / 800, 1.0]), atol=1e-15)
    j2 = perspective_jacobian(None, clinical_geom, np.array([0.0, 0.0, 1600.0]))
    np.testing.assert_allclose(j2[:2, :2], 0.5 * j[:2, :2])


def test_jacobian_matches_finite_differences(clinical_geom):
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-200, 200, 100), rng.uniform(-200, 200, 100), rng.uniform(600, 1400, 100)])
    jac = perspective_jacobian(None, clinical_geom, pts)
    h = 1e-4
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        up, vp, _ = project_camera(clinical_geom, pts + e)
        um, vm, _ = project_camera(clinical_geom, pts - e)
        fd = np.stack([(up - um) / (2 * h), (vp - vm) / (2 * h)], axis=-1)
        np.testing.assert_allclose(jac[:, :2, a], fd, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(jac[:, 2], axis=-1), 1.0)


@given(st.integers(0, 309), st.lists(st.floats(-150, 150), min_size=3, max_size=3))
def test_pipeline_associativity(i, x):
    g = make_circular_geometry(1000.0, 1536.0, 310, (512, 512), 0.8, 116.0)
    pose = view_pose(g, i)
    x = np.array(x)
    u1, v1, _ = project_point(pose, g, x)
    u2, v2, _ = project_camera(g, world_to_camera(pose, x))
    assert abs(u1 - u2) <= 1e-10 and abs(v1 - v2) <= 1e-10


@given(st.integers(1, 309), st.lists(st.floats(-150, 150), min_size=3, max_size=3))
def test_rotation_equivariance(i, x):
    g = make_circular_geometry(1000.0, 1536.0, 310, (512, 512), 0.8, 116.0)
    theta = g.angles[i]
    c, s = np.cos(-theta), np.sin(-theta)
    rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    x = np.array(x)
    ui, vi, _ = project_point(view_pose(g, i), g, x)
    u0, v0, _ = project_point(view_pose(g, 0), g, rz @ x)
    assert abs(ui - u0) <= 1e-8 and abs(vi - v0) <= 1e-8


def test_pixel_rays_hit_their_pixels(clinical_geom):
    pose = view_pose(clinical_geom, 77)
    src, dirs = pixel_rays(pose, clinical_geom)
    for r, c in [(0, 0), (100, 400), (511, 511)]:
        u, v, _ = project_point(pose, clinical_geom, src + 900.0 * dirs[r, c])
        assert (u, v) == pytest.approx((c, r), abs=1e-8)


def test_serialization_round_trip(clinical_geom):
    g2 = ScanGeometry.from_dict(clinical_geom.to_dict())
    assert g2 == clinical_geom
    np.testing.assert_array_equal(g2.angles, clinical_geom.angles)
