import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from roscam.core import (
    EPS_DIV,
    DegenerateQuaternion,
    FrameDims,
    intrinsics,
    normalize_quat,
    project,
    quat_to_rotation,
    rotation_to_quat,
    sigmoid,
    softplus,
    unit_quat_rotation_jacobian,
    world_to_camera_to_c2w,
)
from roscam.core import _unit_quat_to_rotation

finite = st.floats(-3, 3, allow_nan=False)
quats = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 0.1)


def matrix_chain(points, q, t, f, dims):
    """Homogeneous oracle: K [R t; 0 1] X, divided by the duplicated depth row."""
    T = np.eye(4)
    T[:3, :3] = quat_to_rotation(q)
    T[:3, 3] = t
    X = np.c_[points, np.ones(len(points))]
    Y = (intrinsics(f, dims) @ T @ X.T).T
    return Y[:, :2] / Y[:, 3:4], Y[:, 3]


def test_project_matches_matrix_chain(rng):
    dims = FrameDims(640, 480)
    for _ in range(20):
        q = rng.normal(size=4)
        t = rng.normal(size=3) + [0, 0, 5]
        pts = rng.uniform(-1, 1, size=(30, 3))
        res = project(pts, q, t, 400.0, dims)
        pix, depth = matrix_chain(pts, q, t, 400.0, dims)
        assert res.valid.all()
        np.testing.assert_allclose(res.pixels, pix, rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(res.depth, depth, rtol=1e-12)


def test_identity_camera_projects_axis_point_to_principal_point():
    dims = FrameDims(64, 48)
    res = project([[0.0, 0.0, 2.0]], [1, 0, 0, 0], [0, 0, 0], 50.0, dims)
    np.testing.assert_array_equal(res.pixels[0], [32.0, 24.0])


def test_near_zero_depth_is_invalid():
    dims = FrameDims(64, 48)
    res = project([[1.0, 1.0, EPS_DIV / 2], [0.0, 0.0, 1.0]], [1, 0, 0, 0], [0, 0, 0], 50.0, dims)
    assert res.valid.tolist() == [False, True]
    assert np.isnan(res.pixels[0]).all()


def test_gauge_invariance(rng):
    # a similarity transform of the world, undone in every camera, leaves pixels unchanged
    dims = FrameDims(320, 240)
    pts = rng.uniform(-1, 1, size=(40, 3))
    q, t = rng.normal(size=4), np.array([0.1, -0.2, 4.0])
    s, Rg, d = 2.5, quat_to_rotation(rng.normal(size=4)), rng.normal(size=3)
    R = quat_to_rotation(q)
    R2 = R @ Rg.T
    t2 = s * t - R2 @ d
    a = project(pts, q, t, 300.0, dims).pixels
    b = project(s * pts @ Rg.T + d, rotation_to_quat(R2), t2, 300.0, dims).pixels
    np.testing.assert_allclose(a, b, atol=1e-9)


@given(quats)
def test_rotation_is_orthonormal(q):
    R = quat_to_rotation(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


@given(quats, st.floats(0.01, 100))
def test_quaternion_scale_does_not_matter(q, s):
    np.testing.assert_allclose(quat_to_rotation(q), quat_to_rotation(s * q), atol=1e-12)
    np.testing.assert_allclose(quat_to_rotation(q), quat_to_rotation(-q), atol=1e-12)


@given(quats)
def test_rotation_to_quat_round_trip(q):
    qh = normalize_quat(q)
    back = rotation_to_quat(quat_to_rotation(qh))
    assert back[0] >= 0
    # q and -q are the same rotation; only w = 0 leaves the sign open
    err = min(np.abs(back - qh).max(), np.abs(back + qh).max())
    assert err < 1e-9


def test_rotation_jacobian_matches_finite_differences(rng):
    for _ in range(10):
        qh = normalize_quat(rng.normal(size=4))
        J = unit_quat_rotation_jacobian(qh)
        h = 1e-6
        for a in range(4):
            dq = np.zeros(4)
            dq[a] = h
            # raw polynomial map, no renormalization, to match dR/dq of the unit formula
            fd = (_unit_quat_to_rotation(qh + dq) - _unit_quat_to_rotation(qh - dq)) / (2 * h)
            np.testing.assert_allclose(J[a], fd, atol=1e-8)


def test_degenerate_quaternion_rejected():
    with pytest.raises(DegenerateQuaternion):
        quat_to_rotation([0.0, 0.0, 0.0, 0.0])


def test_softplus_is_stable():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    y = softplus(x)
    assert np.all(np.isfinite(y))
    assert y[-1] == 800.0
    assert y[2] == pytest.approx(np.log(2.0))
    assert y[0] >= 0


@settings(max_examples=50)
@given(st.floats(-50, 50))
def test_sigmoid_is_softplus_derivative(x):
    h = 1e-5
    fd = (softplus(x + h) - softplus(x - h)) / (2 * h)
    assert sigmoid(x) == pytest.approx(fd, abs=1e-8)


def test_intrinsics_rejects_nonpositive_focal():
    with pytest.raises(ValueError):
        intrinsics(0.0, FrameDims(10, 10))


def test_c2w_inverts_pose(rng):
    R = quat_to_rotation(rng.normal(size=4))
    t = rng.normal(size=3)
    Rc, c = world_to_camera_to_c2w(R, t)
    np.testing.assert_allclose(R @ c + t, 0.0, atol=1e-12)
    np.testing.assert_allclose(Rc @ R, np.eye(3), atol=1e-12)


def test_softplus_reference_values():
    assert softplus(0.0) == pytest.approx(0.693147, abs=1e-6)
    assert softplus(1.0) == pytest.approx(1.313262, abs=1e-6)
    assert softplus(40.0) == pytest.approx(40.0, rel=1e-12)


def test_reference_rotations():
    np.testing.assert_array_equal(quat_to_rotation([1.0, 0, 0, 0]), np.eye(3))
    np.testing.assert_array_equal(quat_to_rotation([0.0, 1, 0, 0]), np.diag([1.0, -1, -1]))
    np.testing.assert_array_equal(quat_to_rotation([2.0, 0, 0, 0]), np.eye(3))


def test_reference_intrinsics():
    K = intrinsics(100.0, FrameDims(200, 100))
    assert (K[0, 2], K[1, 2]) == (100.0, 50.0)
    np.testing.assert_array_equal(intrinsics(1.0, FrameDims(2, 2)),
                                  [[1, 0, 1, 0], [0, 1, 1, 0], [0, 0, 1, 0], [0, 0, 1, 0]])
    np.testing.assert_array_equal(K @ [0, 0, 1, 1], [100, 50, 1, 1])


def test_reference_projections():
    dims = FrameDims(200, 100)
    res = project([[0, 0, 1], [1, 0, 2]], [1, 0, 0, 0], [0, 0, 0], 100.0, dims)
    np.testing.assert_array_equal(res.pixels, [[100, 50], [150, 50]])
    np.testing.assert_array_equal(res.depth, [1, 2])
