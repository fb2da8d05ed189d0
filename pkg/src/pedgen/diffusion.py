"""Noise schedule, forward noising, the training objective, guidance, DDIM and
goal inpainting.

Everything here works on batched torch tensors of shape (B, T, 147) and is
independent of the network; samplers take a ``predict(x_k, k)`` callable that
returns the clean-motion prediction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ShapeError
from .motion import VEL_DIM, ModelMotion, split_frame, translations_from_velocity
from .skeleton import forward_kinematics

COSINE_OFFSET = 0.008
MAX_BETA = 0.999
FALLBACK_EPS = 1e-6


@dataclass(frozen=True)
class DiffusionSchedule:
    n_steps: int
    alpha_bar: np.ndarray  # (K + 1,), alpha_bar[0] = 1

    def signal(self, k) -> torch.Tensor:
        return torch.as_tensor(np.sqrt(self.alpha_bar[np.asarray(k)]))

    def noise(self, k) -> torch.Tensor:
        return torch.as_tensor(np.sqrt(1.0 - self.alpha_bar[np.asarray(k)]))


def cosine_alpha_bar(k, K: int, s: float = COSINE_OFFSET):
    f = np.cos((np.asarray(k, dtype=np.float64) / K + s) / (1 + s) * math.pi / 2) ** 2
    return f / math.cos(s / (1 + s) * math.pi / 2) ** 2


def build_schedule(K: int) -> DiffusionSchedule:
    """Cosine schedule; per-step noise fractions are clipped to at most 0.999."""
    if K < 1:
        raise ValueError("K must be at least 1")
    raw = cosine_alpha_bar(np.arange(K + 1), K)
    betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, MAX_BETA)
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
    return DiffusionSchedule(K, alpha_bar)


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    traj: float = 1.0
    geo: float = 1.0

    def __post_init__(self):
        if min(self.rec, self.traj, self.geo) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class SampleSpec:
    ddim_steps: int = 100
    guidance: float = 1.0
    stream: int = 0

    def __post_init__(self):
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be at least 1")
        if self.guidance < 0:
            raise ValueError("guidance scale must be non-negative")


def _broadcast_step(coef: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    coef = coef.to(x.dtype)
    return coef.reshape(coef.shape + (1,) * (x.dim() - coef.dim()))


def q_sample(x, k, noise, sched: DiffusionSchedule):
    """``sqrt(abar_k) x + sqrt(1 - abar_k) noise``; a ModelMotion keeps its mask."""
    if isinstance(x, ModelMotion):
        data = q_sample(torch.as_tensor(x.data), k, torch.as_tensor(np.asarray(noise)), sched)
        return ModelMotion(data.numpy(), x.mask.copy())
    if noise.shape != x.shape:
        raise ShapeError("noise must be shaped like x")
    return _broadcast_step(sched.signal(k), x) * x + _broadcast_step(sched.noise(k), x) * noise


def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    """L2 norm over the last axis with a zero (not NaN) gradient at the origin."""
    sq = (v * v).sum(-1)
    nonzero = sq > 0
    return torch.where(nonzero, torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def loss_terms(x, x_hat, offsets, mask=None, t1=None) -> dict[str, torch.Tensor]:
    """Per-sample reconstruction, trajectory and geometric losses.

    Args:
        x, x_hat: (B, T, 147) target and predicted motion (raw model space).
        offsets: (24, 3) or (B, 24, 3) skeleton rest offsets.
        mask: (B, T) labelled frames; terms at other frames are excluded and
            their gradient is exactly zero.
        t1: (B, 3) start positions (cancel out of the trajectory term).

    Returns:
        dict with (B,) tensors ``rec``, ``traj`` and ``geo``.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"target {tuple(x.shape)} and prediction {tuple(x_hat.shape)} differ")
    B, T, _ = x.shape
    if mask is None:
        mask = torch.ones(B, T, dtype=torch.bool)
    m = mask[..., None]
    # unlabelled frames see the target, so nothing downstream depends on them
    x_hat = torch.where(m, x_hat, x.detach())
    zero = torch.zeros((), dtype=x.dtype)

    rec = torch.where(mask, ((x - x_hat) ** 2).sum(-1), zero).sum(-1)

    v, v_hat = x[..., :VEL_DIM], x_hat[..., :VEL_DIM]
    t1 = torch.zeros(B, 3, dtype=x.dtype) if t1 is None else torch.as_tensor(t1, dtype=x.dtype)
    t_gt = translations_from_velocity(torch.where(m, v, zero), t1)
    t_pred = translations_from_velocity(torch.where(m, v_hat, zero))
    traj = torch.where(mask, (t_gt - t_pred - t1[:, None]).abs().sum(-1), zero).sum(-1)

    _, rot = split_frame(x)
    _, rot_hat = split_frame(x_hat)
    offsets = torch.as_tensor(offsets, dtype=x.dtype)
    if offsets.dim() == 3:
        offsets = offsets[:, None]
    eye = torch.eye(3, dtype=x.dtype).expand(B, T, 3, 3)
    origin = torch.zeros(B, T, 3, dtype=x.dtype)
    j_gt = forward_kinematics(rot[..., 1:, :, :], eye, origin, offsets)
    j_hat = forward_kinematics(rot_hat[..., 1:, :, :], eye, origin, offsets)
    geo = torch.where(mask, _safe_norm(j_gt - j_hat).sum(-1), zero).sum(-1)
    return {"rec": rec, "traj": traj, "geo": geo}


def training_loss(x, x_hat, offsets, weights: LossWeights = LossWeights(), mask=None, t1=None) -> torch.Tensor:
    """``w_rec L_rec + w_traj L_traj + w_geo L_geo`` averaged over the batch."""
    terms = loss_terms(x, x_hat, offsets, mask, t1)
    total = weights.rec * terms["rec"] + weights.traj * terms["traj"] + weights.geo * terms["geo"]
    return total.mean()


def guided_predict(predict: Callable, x_k, k, cond, null, scale: float):
    """Classifier-free guidance: ``F(null) + s (F(cond) - F(null))``.

    Scales 1 and 0 evaluate a single branch, so they match the plain
    conditional or unconditional prediction exactly.
    """
    if scale < 0:
        raise ValueError("guidance scale must be non-negative")
    if scale == 1.0:
        return predict(x_k, k, cond)
    uncond = predict(x_k, k, null)
    if scale == 0.0:
        return uncond
    return uncond + scale * (predict(x_k, k, cond) - uncond)


def ddim_timesteps(K: int, n_steps: int, k_max: int | None = None) -> list[int]:
    """Evenly spaced descending steps ``K, ..., K/n``, optionally capped at ``k_max``."""
    n_steps = min(n_steps, K)
    steps = sorted({int(round(K * (i + 1) / n_steps)) for i in range(n_steps)}, reverse=True)
    if k_max is not None:
        steps = [k for k in steps if k <= k_max]
        if not steps or steps[0] != k_max:
            steps.insert(0, k_max)
    return steps


def ddim_loop(predict: Callable, x_k: torch.Tensor, steps: list[int], sched: DiffusionSchedule,
              project: Callable | None = None) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM from ``x_k`` at ``steps[0]`` down to step 0.

    ``predict(x, k)`` returns the clean-motion estimate; ``project`` may edit
    it (inpainting) before every update. Returns the final clean estimate.
    """
    x = x_k
    x_hat = x
    for i, k in enumerate(steps):
        x_hat = predict(x, k)
        if project is not None:
            x_hat = project(x_hat)
        k_prev = steps[i + 1] if i + 1 < len(steps) else 0
        if k_prev == 0:
            break
        a, a_prev = sched.alpha_bar[k], sched.alpha_bar[k_prev]
        eps = (x - math.sqrt(a) * x_hat) / math.sqrt(1.0 - a)
        x = math.sqrt(a_prev) * x_hat + math.sqrt(1.0 - a_prev) * eps
    return x_hat


def inpaint_goal_velocity(vel: torch.Tensor, need: torch.Tensor, free: torch.Tensor | None = None,
                          max_scale: float | None = None) -> torch.Tensor:
    """Rescale velocities so they sum to ``need`` per component.

    Args:
        vel: (B, T, 3) predicted velocities. The first is set to zero.
        need: (B, 3) required displacement ``goal - t1``.
        free: (B, T) frames that may change; the rest are kept. Frame 0 is
            never free.
        max_scale: if given, components whose scale factor would exceed it in
            magnitude also take the uniform fallback.

    Components whose free displacement is below 1e-6 in magnitude get the
    required displacement spread uniformly over the free frames instead.
    """
    B, T, _ = vel.shape
    vel = vel.clone()
    vel[:, 0] = 0
    if free is None:
        free = torch.ones(B, T, dtype=torch.bool)
    free = free.clone()
    free[:, 0] = False
    f = free[..., None].to(vel.dtype)
    fixed_sum = (vel * (1 - f)).sum(1)
    disp = (vel * f).sum(1)
    req = need.to(vel.dtype) - fixed_sum
    ok = disp.abs() >= FALLBACK_EPS
    lam = req / torch.where(ok, disp, torch.ones_like(disp))
    if max_scale is not None:
        ok = ok & (lam.abs() <= max_scale)
    n_free = f.sum(1).clamp_min(1)
    scaled = torch.where(ok[:, None], vel * lam[:, None], (req / n_free)[:, None].expand_as(vel))
    return torch.where(free[..., None], scaled, vel)


def goal_inpaint(mm: ModelMotion, t1, goal) -> ModelMotion:
    """Force ``v_1 = 0`` and scale velocities componentwise so the motion ends at ``goal``."""
    goal = np.asarray(goal, dtype=np.float64)
    if not np.isfinite(goal).all():
        raise ValueError("goal must be finite")
    vel = torch.as_tensor(mm.velocity, dtype=torch.float64)[None]
    need = torch.as_tensor(goal - np.asarray(t1, dtype=np.float64))[None]
    out = mm.data.copy()
    out[:, :VEL_DIM] = inpaint_goal_velocity(vel, need)[0].numpy()
    return ModelMotion(out, mm.mask.copy())
