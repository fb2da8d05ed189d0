"""SMPL-lite: the 24-joint SMPL kinematic tree with fixed rest offsets and a
linear shape basis, no mesh.

Frame convention: +y up, the body faces +z, the subject's left is +x. Offsets
are in meters, expressed in the parent's frame at rest.

Shape basis (``SHAPE_BASIS[:, :, i]`` is the offset change per unit of beta_i):

    ====  =====================================================
    beta  effect
    ====  =====================================================
    0     stature: every offset scaled by 6 % (height and stride)
    1     leg length: knee and ankle offsets scaled by 5 %
    2     torso length: spine and neck offsets scaled by 5 %
    3     arm length: elbow, wrist and hand offsets scaled by 5 %
    4     hip width: x of the hip offsets scaled by 8 %
    5     shoulder width: x of collar and shoulder offsets by 8 %
    6     head size: head offset scaled by 5 %
    7     foot length: foot offsets scaled by 8 %
    8     posture: z of the spine offsets scaled by 10 %
    9     collar height: y of the collar offsets scaled by 5 %
    ====  =====================================================
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError

N_JOINTS = 24
N_BODY_JOINTS = 23
N_BETAS = 10

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

# used by the foot floating metric
FOOT_JOINTS = (10, 11)

CANONICAL_OFFSETS = np.array([
    [0.000, 0.000, 0.000],
    [0.060, -0.090, 0.000],
    [-0.060, -0.090, 0.000],
    [0.000, 0.110, -0.020],
    [0.040, -0.380, 0.000],
    [-0.040, -0.380, 0.000],
    [0.000, 0.135, 0.000],
    [0.000, -0.400, -0.040],
    [0.000, -0.400, -0.040],
    [0.000, 0.055, 0.020],
    [0.020, -0.060, 0.120],
    [-0.020, -0.060, 0.120],
    [0.000, 0.210, -0.030],
    [0.070, 0.120, -0.010],
    [-0.070, 0.120, -0.010],
    [0.000, 0.090, 0.050],
    [0.120, 0.045, -0.010],
    [-0.120, 0.045, -0.010],
    [0.260, 0.000, -0.020],
    [-0.260, 0.000, -0.020],
    [0.250, 0.010, 0.000],
    [-0.250, 0.010, 0.000],
    [0.080, -0.010, -0.010],
    [-0.080, -0.010, -0.010],
])


def _build_shape_basis() -> np.ndarray:
    B = np.zeros((N_JOINTS, 3, N_BETAS))
    c = CANONICAL_OFFSETS

    def scale(col, joints, factor, axes=(0, 1, 2)):
        for j in joints:
            for a in axes:
                B[j, a, col] = factor * c[j, a]

    scale(0, range(N_JOINTS), 0.06)
    scale(1, (4, 5, 7, 8), 0.05)
    scale(2, (3, 6, 9, 12), 0.05)
    scale(3, (18, 19, 20, 21, 22, 23), 0.05)
    scale(4, (1, 2), 0.08, axes=(0,))
    scale(5, (13, 14, 16, 17), 0.08, axes=(0,))
    scale(6, (15,), 0.05)
    scale(7, (10, 11), 0.08)
    scale(8, (3, 6, 9), 0.10, axes=(2,))
    scale(9, (13, 14), 0.05, axes=(1,))
    return B


SHAPE_BASIS = _build_shape_basis()


@dataclass(frozen=True)
class Skeleton:
    parents: tuple[int, ...]
    offsets: np.ndarray  # (24, 3)

    def __post_init__(self):
        if len(self.parents) != self.offsets.shape[0] or self.parents[0] != -1:
            raise ShapeError("parents must list every joint with the root first")
        if any(p >= j or p < 0 for j, p in enumerate(self.parents) if j > 0):
            raise ShapeError("parent of every joint must precede it")
        if not np.isfinite(self.offsets).all():
            raise ValueError("offsets must be finite")

    @property
    def height(self) -> float:
        """Head-to-foot height of the rest pose."""
        pos = rest_positions(self)
        return float(pos[15, 1] - pos[list(FOOT_JOINTS), 1].min())


def skeleton_from_shape(beta) -> Skeleton:
    """Rest offsets ``CANONICAL_OFFSETS + SHAPE_BASIS @ beta``."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (N_BETAS,):
        raise ShapeError(f"beta must have {N_BETAS} entries, got shape {beta.shape}")
    if not np.isfinite(beta).all():
        raise ValueError("beta must be finite")
    return Skeleton(PARENTS, CANONICAL_OFFSETS + SHAPE_BASIS @ beta)


def offsets_from_shape(beta: torch.Tensor) -> torch.Tensor:
    """Batched torch version of :func:`skeleton_from_shape`: (..., 10) -> (..., 24, 3)."""
    base = torch.as_tensor(CANONICAL_OFFSETS, dtype=beta.dtype)
    basis = torch.as_tensor(SHAPE_BASIS, dtype=beta.dtype)
    return base + torch.einsum("jac,...c->...ja", basis, beta)


def rest_positions(skeleton: Skeleton) -> np.ndarray:
    pos = np.zeros((len(skeleton.parents), 3))
    for j, p in enumerate(skeleton.parents):
        if p >= 0:
            pos[j] = pos[p] + skeleton.offsets[j]
    return pos


def forward_kinematics(body_pose, root_orient, trans, offsets, parents=PARENTS):
    """Joint positions from local joint rotations.

    Args:
        body_pose: (..., J-1, 3, 3) rotations of joints 1..J-1 relative to their parent.
        root_orient: (..., 3, 3) world rotation of the root.
        trans: (..., 3) root position.
        offsets: (J, 3) or (..., J, 3) rest offsets, or a :class:`Skeleton`.
        parents: parent index per joint.

    Returns:
        (..., J, 3) joint positions. Numpy in, numpy out.
    """
    was_numpy = not isinstance(body_pose, torch.Tensor)
    if isinstance(offsets, Skeleton):
        parents = offsets.parents
        offsets = offsets.offsets
    body_pose = torch.as_tensor(body_pose)
    dtype = body_pose.dtype
    root_orient = torch.as_tensor(root_orient, dtype=dtype)
    trans = torch.as_tensor(trans, dtype=dtype)
    offsets = torch.as_tensor(offsets, dtype=dtype)

    world_rot = [root_orient]
    pos = [trans]
    for j in range(1, len(parents)):
        p = parents[j]
        pos.append(pos[p] + (world_rot[p] @ offsets[..., j, :, None])[..., 0])
        world_rot.append(world_rot[p] @ body_pose[..., j - 1, :, :])
    out = torch.stack(pos, dim=-2)
    return out.numpy() if was_numpy else out
