import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from pedgen.errors import DegenerateRotationError, NotOrthonormalError
from pedgen.rotations import (
    axis_angle_from_matrix,
    matrix_from_axis_angle,
    matrix_from_rot6d,
    random_rotations,
    rot6d_from_matrix,
    yaw_matrix,
)

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def test_rot6d_identity():
    assert np.array_equal(matrix_from_rot6d([1, 0, 0, 0, 1, 0]), np.eye(3))


def test_rot6d_quarter_turn_about_z():
    assert np.allclose(matrix_from_rot6d([0, 1, 0, -1, 0, 0]), RZ90, atol=1e-12)


def test_rot6d_gram_schmidt_removes_projection():
    assert np.allclose(matrix_from_rot6d([2, 0, 0, 1, 1, 0]), np.eye(3), atol=1e-12)


@pytest.mark.parametrize("bad", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [1, 1, 0, 1, 1, 1e-10]])
def test_rot6d_degenerate_inputs_raise(bad):
    with pytest.raises(DegenerateRotationError):
        matrix_from_rot6d(bad)


def test_rot6d_from_matrix_examples():
    assert np.array_equal(rot6d_from_matrix(np.eye(3)), [1, 0, 0, 0, 1, 0])
    assert np.allclose(rot6d_from_matrix(RZ90), [0, 1, 0, -1, 0, 0])


def test_rot6d_from_matrix_rejects_non_orthonormal():
    with pytest.raises(NotOrthonormalError):
        rot6d_from_matrix(np.diag([1.0, 2.0, 1.0]))
    with pytest.raises(NotOrthonormalError):
        rot6d_from_matrix(np.diag([1.0, 1.0, -1.0]))


def test_round_trip_against_exponential_map_oracle(rng):
    # oracle rotations built independently through scipy's exponential map
    axes = rng.normal(size=(1000, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    R = Rotation.from_rotvec(axes * rng.uniform(0, np.pi, (1000, 1))).as_matrix()
    assert np.abs(matrix_from_rot6d(rot6d_from_matrix(R)) - R).max() < 1e-6


def test_axis_angle_examples():
    assert np.array_equal(matrix_from_axis_angle([0.0, 0.0, 0.0]), np.eye(3))
    assert np.allclose(matrix_from_axis_angle([0, 0, np.pi / 2]), RZ90, atol=1e-12)


def test_axis_angle_same_axis_additivity(rng):
    for axis in np.eye(3):
        a = axis * rng.uniform(-2, 2)
        R = matrix_from_axis_angle(a)
        assert np.allclose(R @ R, matrix_from_axis_angle(2 * a), atol=1e-12)


def test_axis_angle_matches_scipy(rng):
    a = rng.normal(size=(200, 3))
    assert np.allclose(matrix_from_axis_angle(a), Rotation.from_rotvec(a).as_matrix(), atol=1e-12)
    assert np.allclose(matrix_from_axis_angle(axis_angle_from_matrix(matrix_from_axis_angle(a))),
                       matrix_from_axis_angle(a), atol=1e-10)


def test_axis_angle_small_angles_are_smooth():
    a = torch.tensor([1e-9, -2e-9, 3e-9], dtype=torch.float64, requires_grad=True)
    R = matrix_from_axis_angle(a)
    R.sum().backward()
    assert torch.isfinite(a.grad).all()


def test_yaw_turns_forward_toward_left():
    # +z forward, +x left: a quarter turn about +y maps forward onto left
    assert np.allclose(yaw_matrix(np.pi / 2) @ [0, 0, 1], [1, 0, 0], atol=1e-12)


def test_random_rotations_are_proper(rng):
    R = random_rotations(50, rng)
    assert np.allclose(np.swapaxes(R, 1, 2) @ R, np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0)
