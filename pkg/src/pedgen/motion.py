"""Motion sequences and their model-space encoding.

A :class:`Motion` stores SMPL-style parameters per frame. The diffusion model
works on :class:`ModelMotion`: per-frame root velocity (with the first
velocity fixed to zero), root orientation and 23 body rotations in 6D form,
packed into one 147-wide row per frame.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import ShapeError
from .rotations import check_rotation, matrix_from_rot6d, rot6d_from_matrix
from .skeleton import N_BODY_JOINTS, Skeleton, forward_kinematics

FPS = 30
VEL_DIM = 3
ROT_DIM = 6 * (N_BODY_JOINTS + 1)
FRAME_DIM = VEL_DIM + ROT_DIM  # 147


@dataclass(frozen=True)
class Motion:
    trans: np.ndarray  # (T, 3) meters
    root_orient: np.ndarray  # (T, 3, 3)
    body_pose: np.ndarray  # (T, 23, 3, 3)
    mask: np.ndarray  # (T,) bool, frames with a label

    def __post_init__(self):
        T = self.trans.shape[0]
        if T < 2:
            raise ShapeError("a motion needs at least 2 frames")
        if self.trans.shape != (T, 3) or self.root_orient.shape != (T, 3, 3):
            raise ShapeError("trans must be (T, 3) and root_orient (T, 3, 3)")
        if self.body_pose.shape != (T, N_BODY_JOINTS, 3, 3):
            raise ShapeError(f"body_pose must be (T, {N_BODY_JOINTS}, 3, 3)")
        if self.mask.shape != (T,) or self.mask.dtype != np.bool_:
            raise ShapeError("mask must be a (T,) boolean array")
        if not self.mask.any():
            raise ShapeError("mask must mark at least one frame")

    @property
    def n_frames(self) -> int:
        return self.trans.shape[0]

    @classmethod
    def create(cls, trans, root_orient, body_pose, mask=None, validate: bool = True) -> Motion:
        trans = np.asarray(trans, dtype=np.float64)
        mask = np.ones(len(trans), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        m = cls(trans, np.asarray(root_orient, dtype=np.float64),
                np.asarray(body_pose, dtype=np.float64), mask)
        if validate:
            check_rotation(m.root_orient)
            check_rotation(m.body_pose)
        return m

    @classmethod
    def rest(cls, n_frames: int, trans=None) -> Motion:
        eye = np.eye(3)
        trans = np.zeros((n_frames, 3)) if trans is None else np.asarray(trans, dtype=np.float64)
        return cls(trans, np.tile(eye, (n_frames, 1, 1)),
                   np.tile(eye, (n_frames, N_BODY_JOINTS, 1, 1)), np.ones(n_frames, dtype=bool))

    def with_mask(self, mask) -> Motion:
        return replace(self, mask=np.asarray(mask, dtype=bool))

    def joints(self, skeleton: Skeleton) -> np.ndarray:
        """(T, 24, 3) global joint positions."""
        return forward_kinematics(self.body_pose, self.root_orient, self.trans, skeleton)


@dataclass(frozen=True)
class ModelMotion:
    data: np.ndarray  # (T, 147): [velocity | root 6D | body 6D]
    mask: np.ndarray  # (T,) bool

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != FRAME_DIM:
            raise ShapeError(f"model motion must be (T, {FRAME_DIM})")
        if self.mask.shape != (self.data.shape[0],):
            raise ShapeError("mask length must equal frame count")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def velocity(self) -> np.ndarray:
        return self.data[:, :VEL_DIM]

    @property
    def rotations6d(self) -> np.ndarray:
        """(T, 24, 6) with the root first."""
        return self.data[:, VEL_DIM:].reshape(-1, N_BODY_JOINTS + 1, 6)


def encode_model_space(m: Motion) -> ModelMotion:
    vel = np.zeros_like(m.trans)
    vel[1:] = m.trans[1:] - m.trans[:-1]
    rots = np.concatenate((m.root_orient[:, None], m.body_pose), axis=1)
    rot6d = rot6d_from_matrix(rots, check=False).reshape(m.n_frames, ROT_DIM)
    return ModelMotion(np.concatenate((vel, rot6d), axis=1), m.mask.copy())


def decode_model_space(mm: ModelMotion, t1) -> Motion:
    """Invert :func:`encode_model_space`: ``t_t = t1 + sum_{s<=t} v_s``.

    Raises:
        DegenerateRotationError: a 6D rotation cannot be orthonormalized.
    """
    t1 = np.asarray(t1, dtype=np.float64)
    trans = t1 + np.cumsum(mm.velocity, axis=0)
    rots = matrix_from_rot6d(np.ascontiguousarray(mm.rotations6d), check=True)
    return Motion(trans, rots[:, 0], rots[:, 1:], mm.mask.copy())


def translations_from_velocity(vel: torch.Tensor, t1: torch.Tensor | None = None) -> torch.Tensor:
    """Batched ``t1 + cumsum(v)`` along the frame axis (dim -2)."""
    out = torch.cumsum(vel, dim=-2)
    return out if t1 is None else out + t1.unsqueeze(-2)


def split_frame(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(..., 147) -> velocity (..., 3), rotations (..., 24, 3, 3) without degeneracy checks."""
    vel = x[..., :VEL_DIM]
    rot6d = x[..., VEL_DIM:].reshape(x.shape[:-1] + (N_BODY_JOINTS + 1, 6))
    return vel, matrix_from_rot6d(rot6d, check=False)
