import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from donpipe.geometry import (CameraIntrinsics, NonPositiveDepth, PixelCoord, Pose, check_rotation, in_bounds,
                              look_at, project, project_points, round_half_up, transform, unproject,
                              unproject_points)

K100 = CameraIntrinsics(100, 100, 64, 64, 128, 128)
K_OFF = CameraIntrinsics(100, 100, 64, 48, 128, 96)

coord = st.floats(-5, 5, allow_nan=False)
depth = st.floats(0.05, 50, allow_nan=False)


def random_pose(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return Pose(q, rng.standard_normal(3))


def test_project_principal_point():
    assert project((0, 0, 1), K100) == PixelCoord(64, 64)


def test_project_scalar_example():
    # hand evaluation: u = 100*0.1/2 + 64, v = 100*(-0.05)/2 + 48
    u, v = project((0.1, -0.05, 2.0), K_OFF)
    assert u == pytest.approx(69.0, abs=1e-12)
    assert v == pytest.approx(45.5, abs=1e-12)


@pytest.mark.parametrize("p", [(0, 0, -1), (1, 1, 0)])
def test_project_behind_camera(p):
    with pytest.raises(NonPositiveDepth):
        project(p, K100)


def test_unproject_examples():
    np.testing.assert_allclose(unproject((64, 64), 1.0, K100), (0, 0, 1))
    np.testing.assert_allclose(unproject((69, 45.5), 2.0, K_OFF), (0.1, -0.05, 2.0), atol=1e-12)
    with pytest.raises(NonPositiveDepth):
        unproject((10, 10), 0.0, K100)


@given(coord, coord, depth)
def test_roundtrip_property(x, y, z):
    p = np.array([x, y, z])
    back = unproject(project(p, K100), z, K100)
    np.testing.assert_allclose(back, p, atol=1e-9 * max(1.0, abs(x), abs(y), z))


def test_vectorized_matches_scalar():
    rng = np.random.default_rng(0)
    P = np.c_[rng.uniform(-1, 1, (50, 2)), rng.uniform(0.5, 3, 50)]
    uv = project_points(P, K_OFF)
    for p, q in zip(P, uv):
        np.testing.assert_allclose(project(p, K_OFF), q, rtol=1e-14)
    np.testing.assert_allclose(unproject_points(uv, P[:, 2], K_OFF), P, atol=1e-12)


def test_transform_examples():
    assert np.allclose(transform(Pose.identity(), (1, 2, 3)), (1, 2, 3))
    t = Pose(np.eye(3), np.array([0, 0, 0.5]))
    np.testing.assert_allclose(transform(t, (1, 2, 3)), (1, 2, 3.5))
    pose = random_pose(np.random.default_rng(1))
    p = np.array([0.3, -0.7, 2.0])
    np.testing.assert_allclose(transform(pose.inverse(), transform(pose, p)), p, atol=1e-12)


def test_compose_and_matrix():
    rng = np.random.default_rng(2)
    a, b = random_pose(rng), random_pose(rng)
    np.testing.assert_allclose(a.compose(b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)
    assert Pose.from_matrix(a.matrix()) == a


def test_rotation_validation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, 1.001]), np.zeros(3))
    with pytest.raises(ValueError):
        check_rotation(np.diag([1.0, 1.0, -1.0]))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 100, 10, 10, 64, 64)
    with pytest.raises(ValueError):
        CameraIntrinsics(100, 100, 70, 10, 64, 64)


@settings(max_examples=50)
@given(st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.5, 3)))
def test_look_at_points_at_target(eye):
    target = np.array([0.0, 0.0, 0.2])
    pose = look_at(eye, target)
    check_rotation(pose.rotation)
    cam = transform(pose.inverse(), target)
    assert cam[2] > 0
    assert abs(cam[0]) < 1e-9 and abs(cam[1]) < 1e-9


def test_round_half_up():
    np.testing.assert_array_equal(round_half_up([0.5, 1.5, -0.5, 2.49]), [1, 2, 0, 2])


def test_in_bounds():
    K = CameraIntrinsics(10, 10, 1.5, 1.5, 4, 4)
    uv = np.array([[-0.5, 0], [-0.51, 0], [3.49, 3.49], [3.5, 0]])
    np.testing.assert_array_equal(in_bounds(uv, K), [True, False, True, False])
