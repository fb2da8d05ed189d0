"""Rotation conversions: 6D (first two matrix columns), axis-angle and matrices.

Matrices act on column vectors. All functions are batched over leading
dimensions and accept torch tensors; numpy arrays are converted and returned
as numpy arrays.
"""
from __future__ import annotations

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .errors import DegenerateRotationError, NotOrthonormalError

DEGENERATE_TOL = 1e-8
ORTHONORMAL_TOL = 1e-5


def _to_torch(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def matrix_from_rot6d(r, check: bool = True):
    """Gram-Schmidt decode of a 6D rotation ``(a1, a2)`` into a 3x3 matrix.

    Column 1 is ``a1`` normalized, column 2 is ``a2`` with its ``a1`` component
    removed and normalized, column 3 is their cross product.

    Args:
        r: (..., 6) array.
        check: raise on degenerate input instead of clamping norms. The
            training path turns this off so arbitrary network outputs stay
            differentiable.

    Raises:
        DegenerateRotationError: ``a1`` is (near) zero or ``a2`` is (near)
            parallel to it, with tolerance 1e-8.
    """
    r, was_numpy = _to_torch(r)
    a1, a2 = r[..., 0:3], r[..., 3:6]
    n1 = a1.norm(dim=-1, keepdim=True)
    if check and bool((n1 < DEGENERATE_TOL).any()):
        raise DegenerateRotationError("first 6D vector is zero")
    b1 = a1 / n1.clamp_min(DEGENERATE_TOL)
    u = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = u.norm(dim=-1, keepdim=True)
    if check and bool((n2 < DEGENERATE_TOL).any()):
        raise DegenerateRotationError("6D vectors are parallel")
    b2 = u / n2.clamp_min(DEGENERATE_TOL)
    b3 = torch.cross(b1, b2, dim=-1)
    R = torch.stack((b1, b2, b3), dim=-1)
    return R.numpy() if was_numpy else R


def check_rotation(R, tol: float = ORTHONORMAL_TOL) -> None:
    R, _ = _to_torch(R)
    eye = torch.eye(3, dtype=R.dtype)
    err = (R.transpose(-1, -2) @ R - eye).abs().amax() if R.numel() else torch.tensor(0.0)
    if err > tol:
        raise NotOrthonormalError(f"matrix is not orthonormal (max error {float(err):.3g})")
    if R.numel() and bool((torch.linalg.det(R) <= 0).any()):
        raise NotOrthonormalError("matrix has non-positive determinant")


def rot6d_from_matrix(R, check: bool = True):
    """First two columns of ``R`` flattened to (..., 6)."""
    if check:
        check_rotation(R)
    R, was_numpy = _to_torch(R)
    out = torch.cat((R[..., :, 0], R[..., :, 1]), dim=-1)
    return out.numpy() if was_numpy else out


def matrix_from_axis_angle(a):
    """Rodrigues formula; the zero vector maps to the identity."""
    a, was_numpy = _to_torch(a)
    theta2 = (a * a).sum(-1, keepdim=True)[..., None]
    theta = theta2.sqrt()
    small = theta2 < 1e-12
    safe = torch.where(small, torch.ones_like(theta), theta)
    sin_term = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(safe) / safe)
    cos_term = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(safe)) / (safe * safe))
    x, y, z = a[..., 0], a[..., 1], a[..., 2]
    zero = torch.zeros_like(x)
    K = torch.stack((zero, -z, y, z, zero, -x, -y, x, zero), dim=-1).reshape(a.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=a.dtype).expand(K.shape)
    R = eye + sin_term * K + cos_term * (K @ K)
    return R.numpy() if was_numpy else R


def axis_angle_from_matrix(R) -> np.ndarray:
    """Log map to axis-angle vectors (numpy, float64)."""
    R = np.asarray(R.detach().numpy() if isinstance(R, torch.Tensor) else R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    if flat.shape[0] == 0:
        return np.zeros(R.shape[:-2] + (3,))
    return Rotation.from_matrix(flat).as_rotvec().reshape(R.shape[:-2] + (3,))


def yaw_matrix(angle):
    """Rotation about the vertical (+y) axis."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    one, zero = np.ones_like(c), np.zeros_like(c)
    return np.stack((c, zero, s, zero, one, zero, -s, zero, c), axis=-1).reshape(angle.shape + (3, 3))


def random_rotations(n: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform rotations from normalized Gaussian quaternions."""
    q = gen.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return Rotation.from_quat(q).as_matrix()
