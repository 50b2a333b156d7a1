import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcap import geometry as g
from dualcap.errors import BehindCamera, NonPositiveDepth, SizeMismatch, SpecInvalid

from conftest import random_rotation, random_similarity


def test_project_optical_axis(intr):
    assert np.allclose(g.project([0, 0, 2.0], g.Pose.identity(), intr), [250, 250], atol=0)


def test_project_offset_point(intr):
    assert np.allclose(g.project([0.1, 0, 1.0], g.Pose.identity(), intr), [300, 250], atol=1e-12)


def test_project_behind_camera(intr):
    with pytest.raises(BehindCamera):
        g.project([0, 0, -1.0], g.Pose.identity(), intr)


def test_backproject_roundtrip(rng, intr):
    for _ in range(1000):
        pose = g.Pose(random_rotation(rng), rng.uniform(-3, 3, 3))
        q = rng.uniform(0, 500, 2)
        d = rng.uniform(0.2, 20)
        X = g.backproject(q, d, pose, intr)
        assert np.allclose(g.project(X, pose, intr), q, atol=1e-9)
        assert np.isclose((pose.rotation @ X + pose.translation)[2], d, atol=1e-9)


def test_backproject_rejects_bad_depth(intr):
    with pytest.raises(NonPositiveDepth):
        g.backproject([10, 10], 0.0, g.Pose.identity(), intr)


def test_vectorized_matches_scalar(rng, intr):
    pose = g.Pose(random_rotation(rng), rng.uniform(-1, 1, 3))
    q = rng.uniform(0, 500, (20, 2))
    d = rng.uniform(1, 5, 20)
    X = g.backproject_points(q, d, pose.rotation, pose.translation, intr)
    for i in range(20):
        assert np.allclose(X[i], g.backproject(q[i], d[i], pose, intr), atol=1e-12)
    uv, z = g.project_points(X, pose.rotation, pose.translation, intr)
    assert np.allclose(uv, q, atol=1e-9) and np.allclose(z, d, atol=1e-12)


def test_project_points_masks_behind(intr):
    uv, z = g.project_points(np.array([[0, 0, -1.0], [0, 0, 1.0]]), np.eye(3), np.zeros(3), intr)
    assert np.all(np.isnan(uv[0])) and np.allclose(uv[1], [250, 250])


def test_yaw_quarter_turn():
    assert np.allclose(g.yaw_rotation(np.pi / 2) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_yaw_derivative_matches_fd():
    a, h = 0.7, 1e-6
    fd = (g.yaw_rotation(a + h) - g.yaw_rotation(a - h)) / (2 * h)
    assert np.allclose(fd, g.yaw_rotation_derivative(a), atol=1e-9)


def test_similarity_inverse_compose(rng):
    for _ in range(100):
        t = random_similarity(rng)
        e = t.compose(t.inverse())
        assert np.isclose(e.scale, 1.0, atol=1e-12)
        assert np.allclose(e.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(e.translation, 0, atol=1e-9)


def test_similarity_compose_order(rng):
    a, b = random_similarity(rng), random_similarity(rng)
    P = rng.normal(size=(10, 3))
    assert np.allclose(a.compose(b).apply(P), a.apply(b.apply(P)), atol=1e-10)
    assert np.allclose(a.compose(b).matrix(), a.matrix() @ b.matrix(), atol=1e-10)


def test_similarity_rejects_bad_inputs():
    with pytest.raises(SpecInvalid):
        g.SimilarityTransform(0.0, np.eye(3), np.zeros(3))
    with pytest.raises(SpecInvalid):
        g.SimilarityTransform(1.0, np.diag([1, 1, -1.0]), np.zeros(3))


def test_pose_center_and_matrix(rng):
    R = random_rotation(rng)
    c = rng.normal(size=3)
    p = g.Pose.from_center(R, c)
    assert np.allclose(p.center, c, atol=1e-12)
    assert np.allclose(p.matrix() @ p.inverse_matrix(), np.eye(4), atol=1e-12)
    assert np.allclose(p.transform(c), 0, atol=1e-12)


def test_pose_is_immutable():
    p = g.Pose.identity()
    with pytest.raises(ValueError):
        p.rotation[0, 0] = 2.0


def test_intrinsics_validation():
    with pytest.raises(SpecInvalid):
        g.Intrinsics(-1, 1, 1, 1, 2, 2)
    with pytest.raises(SpecInvalid):
        g.Intrinsics(1, 1, 5, 1, 2, 2)
    k = g.Intrinsics(500, 400, 10, 20, 40, 50)
    assert np.allclose(k.K @ k.K_inv, np.eye(3))
    assert g.Intrinsics.from_dict(k.to_dict()) == k


def test_trajectory_validation(intr):
    R = np.stack([np.eye(3)] * 3)
    T = np.zeros((3, 3))
    with pytest.raises(SpecInvalid):
        g.Trajectory("a", [0, 0, 1], R, T, intr)
    with pytest.raises(SizeMismatch):
        g.Trajectory("a", [0, 1], R, T, intr)
    bad = R.copy()
    bad[1] *= 2
    with pytest.raises(SpecInvalid):
        g.Trajectory("a", [0, 1, 2], bad, T, intr)
    tr = g.Trajectory("a", [0, 1, 2], R, T, intr)
    assert len(tr.slice(1)) == 2
    assert np.array_equal(tr[2].rotation, tr.poses[2].rotation)
    assert np.allclose(tr.centers, 0)


def test_pointcloud_validation():
    with pytest.raises(SpecInvalid):
        g.PointCloud([[np.nan, 0, 0]])
    with pytest.raises(SizeMismatch):
        g.PointCloud(np.zeros((2, 3)), confidence=[1.0])
    with pytest.raises(SpecInvalid):
        g.PointCloud(np.zeros((1, 3)), confidence=[1.5])


def test_wrap_angle():
    assert g.wrap_angle(-np.pi) == np.pi
    assert np.isclose(g.wrap_angle(3 * np.pi / 2), -np.pi / 2)
    assert np.allclose(g.wrap_angle(np.array([0.0, 2 * np.pi])), [0, 0], atol=1e-15)


def test_quaternion_roundtrip(rng):
    for _ in range(50):
        R = random_rotation(rng)
        q = g.matrix_to_quat_xyzw(R)
        assert q[3] >= 0
        assert np.allclose(g.quat_xyzw_to_matrix(q), R, atol=1e-12)
    with pytest.raises(SpecInvalid):
        g.quat_xyzw_to_matrix([0, 0, 0, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_so3_exp_log(w):
    w = np.array(w)
    if np.linalg.norm(w) >= np.pi - 1e-6:
        w = w / np.linalg.norm(w) * 3.0
    R = g.so3_exp(w)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.allclose(g.so3_log(R), w, atol=1e-9)


def test_so3_right_jacobian_fd(rng):
    for _ in range(20):
        w = rng.normal(size=3)
        dw = 1e-6 * rng.normal(size=3)
        lhs = g.so3_exp(w + dw)
        rhs = g.so3_exp(w) @ g.so3_exp(g.so3_right_jacobian(w) @ dw)
        assert np.allclose(lhs, rhs, atol=1e-11)
    assert np.allclose(g.so3_exp(np.zeros(3)), np.eye(3))
