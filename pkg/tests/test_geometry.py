import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatflow import geometry
from splatflow.errors import BehindCameraError, ValidationError

unit_quats = st.lists(st.floats(-1.0, 1.0), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3)


def test_identity_quat_gives_identity_matrix():
    R = geometry.quat_to_rotmat(np.array([0.0, 0.0, 0.0, 1.0]))
    np.testing.assert_allclose(R, np.eye(3), atol=1e-12)


def test_quarter_turn_about_z_maps_x_to_y():
    s = np.sin(np.pi / 4.0)
    c = np.cos(np.pi / 4.0)
    R = geometry.quat_to_rotmat(np.array([0.0, 0.0, s, c]))
    np.testing.assert_allclose(R @ np.array([1.0, 0.0, 0.0]),
                               np.array([0.0, 1.0, 0.0]), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(unit_quats)
def test_rotmat_is_orthonormal(q):
    R = geometry.quat_to_rotmat(np.asarray(q, dtype=np.float64))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-6)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-6)


def test_build_covariance_identity():
    cov = geometry.build_covariance(np.array([0.0, 0.0, 0.0, 1.0]),
                                    np.array([1.0, 1.0, 1.0]))
    np.testing.assert_allclose(cov, np.eye(3), atol=1e-12)


def test_build_covariance_quarter_turn_permutes_axes():
    s = np.sin(np.pi / 4.0)
    c = np.cos(np.pi / 4.0)
    cov = geometry.build_covariance(np.array([0.0, 0.0, s, c]),
                                    np.array([2.0, 1.0, 1.0]))
    # rotating the x-elongated ellipsoid 90 deg about z moves variance to y
    np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-9)


def test_build_covariance_eigenvalues_are_squared_scales():
    rng = np.random.default_rng(5)
    for _ in range(10):
        q = rng.normal(size=4)
        s = rng.uniform(0.2, 3.0, size=3)
        cov = geometry.build_covariance(q, s)
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)),
                                   np.sort(s ** 2), rtol=1e-9)


def test_build_covariance_sign_flip_invariance():
    rng = np.random.default_rng(6)
    q = rng.normal(size=4)
    s = rng.uniform(0.5, 2.0, size=3)
    np.testing.assert_allclose(geometry.build_covariance(q, s),
                               geometry.build_covariance(-q, s), atol=1e-12)


def test_build_covariance_rejects_nonpositive_scale():
    with pytest.raises(ValidationError):
        geometry.build_covariance(np.array([0.0, 0.0, 0.0, 1.0]),
                                  np.array([1.0, -0.5, 1.0]))


def test_project_point_on_axis_hits_principal_point():
    K = (100.0, 100.0, 50.0, 40.0)
    uv, z = geometry.project_point(np.array([0.0, 0.0, 3.0]), np.eye(4), K)
    np.testing.assert_allclose(uv, [50.0, 40.0])
    assert z == pytest.approx(3.0)


def test_project_point_direct_formula():
    K = (100.0, 100.0, 50.0, 50.0)
    uv, z = geometry.project_point(np.array([1.0, 0.0, 2.0]), np.eye(4), K)
    np.testing.assert_allclose(uv, [100.0, 50.0])
    assert z == pytest.approx(2.0)


def test_project_point_behind_camera_raises():
    K = (100.0, 100.0, 50.0, 50.0)
    with pytest.raises(BehindCameraError):
        geometry.project_point(np.array([0.0, 0.0, 0.0]), np.eye(4), K)


def test_project_covariance_isotropic_on_axis():
    f, d, sigma = 120.0, 4.0, 0.3
    cov3 = (sigma ** 2) * np.eye(3)
    cov2 = geometry.project_covariance(cov3, np.array([0.0, 0.0, d]), np.eye(4),
                                       (f, f, 50.0, 50.0))
    expect = (f * sigma / d) ** 2 + geometry.LOWPASS_FLOOR
    np.testing.assert_allclose(cov2, expect * np.eye(2), atol=1e-9)


def test_project_covariance_zero_gives_floor():
    cov2 = geometry.project_covariance(np.zeros((3, 3)), np.array([0.0, 0.0, 2.0]),
                                       np.eye(4), (100.0, 100.0, 50.0, 50.0))
    np.testing.assert_allclose(cov2, geometry.LOWPASS_FLOOR * np.eye(2), atol=1e-12)


def test_project_covariance_depth_scaling():
    f, sigma = 100.0, 0.2
    cov3 = (sigma ** 2) * np.eye(3)
    K = (f, f, 50.0, 50.0)
    near = geometry.project_covariance(cov3, np.array([0.0, 0.0, 2.0]), np.eye(4), K)
    far = geometry.project_covariance(cov3, np.array([0.0, 0.0, 4.0]), np.eye(4), K)
    pre_near = near[0, 0] - geometry.LOWPASS_FLOOR
    pre_far = far[0, 0] - geometry.LOWPASS_FLOOR
    assert pre_far == pytest.approx(pre_near / 4.0, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(unit_quats, st.lists(st.floats(0.1, 2.0), min_size=3, max_size=3))
def test_projected_covariance_is_symmetric(q, s):
    cov3 = geometry.build_covariance(np.asarray(q), np.asarray(s))
    cov2 = geometry.project_covariance(cov3, np.array([0.4, -0.2, 3.0]), np.eye(4),
                                       (90.0, 110.0, 32.0, 32.0))
    np.testing.assert_allclose(cov2, cov2.T, atol=1e-12)


def test_quat_multiply_matches_rotation_composition():
    rng = np.random.default_rng(7)
    a = geometry.normalize_quat(rng.normal(size=4))
    b = geometry.normalize_quat(rng.normal(size=4))
    Rab = geometry.quat_to_rotmat(geometry.quat_multiply(a, b))
    np.testing.assert_allclose(Rab, geometry.quat_to_rotmat(a) @ geometry.quat_to_rotmat(b),
                               atol=1e-12)


def test_axis_angle_zero_is_identity():
    q = geometry.quat_from_axis_angle(np.zeros(3))
    np.testing.assert_allclose(q, [0.0, 0.0, 0.0, 1.0])


def test_axis_angle_matches_half_angle_formula():
    w = np.array([0.0, 0.0, 0.7])
    q = geometry.quat_from_axis_angle(w)
    np.testing.assert_allclose(q, [0.0, 0.0, np.sin(0.35), np.cos(0.35)], atol=1e-12)


def test_camera_rays_are_unit_and_hit_principal_axis():
    E = geometry.look_at_extrinsic([0.0, -3.0, 1.0], [0.0, 5.0, 1.0])
    rays = geometry.camera_rays(E, (64.0, 64.0, 32.0, 24.0), 64, 48)
    np.testing.assert_allclose(np.linalg.norm(rays, axis=-1), 1.0, atol=1e-12)
    # ray through the principal point is the camera forward axis
    fwd = E[2, :3]
    np.testing.assert_allclose(rays[24, 32], fwd / np.linalg.norm(fwd), atol=1e-2)
