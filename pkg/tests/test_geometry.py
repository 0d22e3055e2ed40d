import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from downvio.fusion import AhrsAttitude, Extrinsics
from downvio.geometry import (
    NADIR,
    CameraIntrinsics,
    DegenerateWarpError,
    PlaneNormal,
    PointAtInfinityError,
    WarpParams,
    build_homography,
    matrix_to_rodrigues,
    normal_from_attitude,
    rodrigues_derivatives,
    rodrigues_to_matrix,
    warp_point,
    warp_points,
    wrap_rotvec,
)

K = CameraIntrinsics(fx=300.0, fy=300.0, cx=160.0, cy=120.0)


def quaternion_rotation(r):
    """Rotation matrix through a unit quaternion, written out independently."""
    r = np.asarray(r, dtype=float)
    angle = np.linalg.norm(r)
    if angle == 0:
        return np.eye(3)
    axis = r / angle
    w = math.cos(angle / 2)
    x, y, z = math.sin(angle / 2) * axis
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def test_intrinsics_validation_and_matrix():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0)
    np.testing.assert_allclose(K.matrix @ K.inverse, np.eye(3), atol=1e-15)
    half = K.scaled(0.5)
    assert (half.fx, half.cx) == (150.0, 79.75)


def test_zero_rotation_is_identity():
    np.testing.assert_array_equal(rodrigues_to_matrix([0, 0, 0]), np.eye(3))


def test_quarter_yaw():
    np.testing.assert_allclose(
        rodrigues_to_matrix([0, 0, math.pi / 2]), [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15
    )


def test_random_rotations_match_quaternion_path(rng):
    for _ in range(200):
        r = rng.normal(size=3)
        r *= rng.uniform(0, 3.1) / np.linalg.norm(r)
        rot = rodrigues_to_matrix(r)
        np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-12)
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(rot, quaternion_rotation(r), atol=1e-10)


def test_small_angle_branch():
    r = np.array([1e-9, -2e-9, 3e-10])
    np.testing.assert_allclose(rodrigues_to_matrix(r), quaternion_rotation(r), atol=1e-17)


def test_rotation_log_inverts_exponential(rng):
    for _ in range(50):
        r = rng.uniform(-1.5, 1.5, 3)
        np.testing.assert_allclose(matrix_to_rodrigues(rodrigues_to_matrix(r)), r, atol=1e-12)


def test_wrap_keeps_rotation(rng):
    r = np.array([0.0, 0.0, 1.5 * math.pi])
    w = wrap_rotvec(r)
    assert np.linalg.norm(w) < math.pi
    np.testing.assert_allclose(rodrigues_to_matrix(w), rodrigues_to_matrix(r), atol=1e-12)


@pytest.mark.parametrize("scale", [0.0, 1e-7, 1e-3, 0.5, 2.5])
def test_rotation_derivatives_match_finite_differences(rng, scale):
    r = rng.normal(size=3)
    r = r / np.linalg.norm(r) * scale
    d = rodrigues_derivatives(r)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (rodrigues_to_matrix(r + e) - rodrigues_to_matrix(r - e)) / (2 * h)
        np.testing.assert_allclose(d[i], fd, atol=1e-8)


def test_plane_normal_vector_and_nadir():
    np.testing.assert_allclose(NADIR.vector, [0, 0, 1], atol=1e-16)
    n = PlaneNormal(theta=0.3, phi=-0.4)
    assert np.linalg.norm(n.vector) == pytest.approx(1.0, abs=1e-12)


def test_theta_uses_both_signs():
    n = PlaneNormal.from_vector([-1.0, -1.0, 0.5])
    assert -math.pi < n.theta < -math.pi / 2


@settings(max_examples=100, deadline=None)
@given(theta=st.floats(-3.1, 3.1), phi=st.floats(-1.5, 1.5))
def test_normal_roundtrip(theta, phi):
    back = PlaneNormal.from_vector(PlaneNormal(theta, phi).vector)
    assert back.phi == pytest.approx(phi, abs=1e-12)
    assert math.cos(back.theta - theta) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(back.vector, PlaneNormal(theta, phi).vector, atol=1e-12)


def test_identity_homography():
    np.testing.assert_allclose(build_homography(K, WarpParams(), NADIR), np.eye(3), atol=1e-15)


def test_pure_rotation_homography(rng):
    r = rng.uniform(-0.2, 0.2, 3)
    h = build_homography(K, WarpParams(r=tuple(r)), PlaneNormal(0.4, 1.2))
    ref = K.matrix @ rodrigues_to_matrix(r) @ K.inverse
    np.testing.assert_allclose(h, ref / ref[2, 2], atol=1e-12)


def test_lateral_translation_homography():
    h = build_homography(K, WarpParams(t=(0.1, 0.0, 0.0)), NADIR)
    expected = np.eye(3)
    expected[0, 2] = 30.0
    np.testing.assert_allclose(h, expected, atol=1e-12)


def test_degenerate_homography():
    # t n^T cancels the identity's third column: singular
    with pytest.raises(DegenerateWarpError):
        build_homography(K, WarpParams(t=(0.0, 0.0, -1.0)), NADIR)


def test_warp_point_examples():
    assert warp_point(np.eye(3), 17, 29) == (17, 29)
    h = np.eye(3)
    h[0, 2] = 30.0
    assert warp_point(h, 10, 10) == (40, 10)
    with pytest.raises(PointAtInfinityError):
        warp_point(np.array([[1, 0, 0], [0, 1, 0], [1, 0, -5.0]]), 5.0, 3.0)


def test_warp_point_matches_explicit_projection(rng):
    for _ in range(20):
        h = np.eye(3) + rng.normal(scale=0.1, size=(3, 3))
        x, y = rng.uniform(0, 300, 2)
        v = h @ np.array([x, y, 1.0])
        got = warp_point(h, x, y)
        assert got[0] == pytest.approx(v[0] / v[2], abs=1e-12)
        assert got[1] == pytest.approx(v[1] / v[2], abs=1e-12)
        xs, ys = warp_points(h, np.array([x]), np.array([y]))
        assert (xs[0], ys[0]) == pytest.approx(got, abs=1e-12)


finite_vec = arrays(np.float64, 3, elements=st.floats(-1, 1))


@settings(max_examples=100, deadline=None)
@given(t=finite_vec, r=finite_vec, theta=st.floats(-3, 3), phi=st.floats(0.8, 1.57), x=st.floats(20, 300), y=st.floats(20, 220))
def test_inverse_warp_returns_start_point(t, r, theta, phi, x, y):
    p = WarpParams(t=tuple(0.5 * t / max(1.0, np.linalg.norm(t))), r=tuple(0.2 * r / max(1.0, np.linalg.norm(r))))
    n = PlaneNormal(theta, phi)
    inv, n_prev = p.inverse(n)
    fx, fy = warp_point(build_homography(K, p, n), x, y)
    bx, by = warp_point(build_homography(K, inv, n_prev), fx, fy)
    assert bx == pytest.approx(x, abs=1e-9)
    assert by == pytest.approx(y, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(t=finite_vec, r=finite_vec, theta=st.floats(-3, 3), phi=st.floats(-1.5, 1.5))
def test_homography_invariant_under_joint_sign_flip(t, r, theta, phi):
    n = PlaneNormal(theta, phi)
    flipped = PlaneNormal.from_vector(-n.vector)
    a = build_homography(K, WarpParams(t=tuple(0.3 * t), r=tuple(0.2 * r)), n)
    b = build_homography(K, WarpParams(t=tuple(-0.3 * t), r=tuple(0.2 * r)), flipped)
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(theta=st.floats(-3, 3), phi=st.floats(-1.5, 1.5))
def test_zero_parameters_give_identity_for_any_normal(theta, phi):
    np.testing.assert_allclose(build_homography(K, WarpParams(), PlaneNormal(theta, phi)), np.eye(3), atol=1e-15)


def test_level_attitude_gives_nadir_normal():
    n = normal_from_attitude(AhrsAttitude(np.eye(3)), Extrinsics())
    np.testing.assert_allclose(n.vector, [0, 0, 1], atol=1e-15)
    assert n.phi == pytest.approx(math.pi / 2)


def test_rolled_attitude_tilts_normal():
    n = normal_from_attitude(AhrsAttitude(rot_x(math.radians(10))), Extrinsics()).vector
    assert np.linalg.norm(n) == pytest.approx(1.0, abs=1e-12)
    assert math.degrees(math.acos(n[2])) == pytest.approx(10.0, abs=1e-9)
    # down in body = Rx^T (0,0,-1) = (0, -sin, -cos); camera flips y and z
    np.testing.assert_allclose(n, [0.0, math.sin(math.radians(10)), math.cos(math.radians(10))], atol=1e-12)
