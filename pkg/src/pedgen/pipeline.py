"""A trained generator: network + data normalization + schedule.

Sampling runs DDIM in the normalized model space. Constraints (zero first
velocity, goal endpoint, fixed frames) are applied to every clean-motion
prediction in raw units, and once more in float64 on the final output so that
goal endpoints are exact.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .diffusion import (
    DiffusionSchedule,
    SampleSpec,
    ddim_loop,
    ddim_timesteps,
    guided_predict,
    inpaint_goal_velocity,
    q_sample,
)
from .errors import ShapeError
from .model import Denoiser, GenerationContext, collate_contexts
from .motion import FRAME_DIM, VEL_DIM, Motion, ModelMotion, decode_model_space
from .rng import Stream

STD_FLOOR = 0.05
BATCH = 256


@dataclass
class MotionScaler:
    mean: torch.Tensor  # (147,)
    std: torch.Tensor  # (147,)

    @classmethod
    def fit(cls, data: np.ndarray, mask: np.ndarray) -> MotionScaler:
        """Per-dimension statistics over labelled frames of (N, T, 147) data."""
        rows = data[mask]
        mean = rows.mean(0)
        std = np.maximum(rows.std(0), STD_FLOOR)
        return cls(torch.tensor(mean, dtype=torch.float32), torch.tensor(std, dtype=torch.float32))

    @classmethod
    def identity(cls) -> MotionScaler:
        return cls(torch.zeros(FRAME_DIM), torch.ones(FRAME_DIM))

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.std.to(z.dtype) + self.mean.to(z.dtype)


# Larger factors mostly amplify gait sway in a component the model barely moved.
GOAL_MAX_SCALE = 3.0


@dataclass
class Constraints:
    """Per-sample constraints applied to clean-motion predictions (raw units)."""

    need: torch.Tensor | None = None  # (B, 3) goal - start, NaN rows for no goal
    known: torch.Tensor | None = None  # (B, T, 147) fixed values
    known_mask: torch.Tensor | None = None  # (B, T)

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        x = x.clone()
        if self.known is not None:
            x = torch.where(self.known_mask[..., None], self.known.to(x.dtype), x)
        x[:, 0, :VEL_DIM] = 0
        if self.need is not None:
            has_goal = ~torch.isnan(self.need).any(-1)
            if has_goal.any():
                free = None if self.known_mask is None else ~self.known_mask[has_goal]
                vel = inpaint_goal_velocity(x[has_goal, :, :VEL_DIM], self.need[has_goal].to(x.dtype), free,
                                            GOAL_MAX_SCALE)
                x[has_goal, :, :VEL_DIM] = vel
        return x


class MotionGenerator:
    def __init__(self, model: Denoiser, scaler: MotionScaler, schedule: DiffusionSchedule, n_frames: int):
        self.model = model
        self.scaler = scaler
        self.schedule = schedule
        self.n_frames = n_frames

    @property
    def trained(self) -> bool:
        return int(self.model.trained_steps) > 0

    def _predict(self, mask=None):
        def predict(z, k, c):
            return self.model(z, torch.full((z.shape[0],), k, dtype=torch.long), c, mask)
        return predict

    @torch.no_grad()
    def _run(self, z_k, steps, cond, null, guidance, constraints: Constraints, mask=None) -> np.ndarray:
        predict = self._predict(mask)

        def step(z, k):
            return guided_predict(predict, z, k, cond, null, guidance)

        def project(z_hat):
            x = constraints.apply(self.scaler.denormalize(z_hat))
            return self.scaler.normalize(x)

        z_hat = ddim_loop(step, z_k, steps, self.schedule, project)
        x = self.scaler.denormalize(z_hat.double())
        return constraints.apply(x).numpy()

    def conditions(self, contexts: Sequence[GenerationContext]):
        batch = collate_contexts(contexts, voxels=self.model.cfg.use_scene)
        with torch.no_grad():
            cond = self.model.encode_context(batch)
        return cond, self.model.null_context(len(contexts))

    def sample(self, contexts: Sequence[GenerationContext], spec: SampleSpec = SampleSpec(),
               stream: Stream | None = None, n_frames: int | None = None,
               known: np.ndarray | None = None, known_mask: np.ndarray | None = None,
               use_goal: bool = True) -> list[ModelMotion]:
        """Generate one motion per context (raw model space).

        Sample ``i`` starts from the noise of ``stream.split(i)``, so results
        do not depend on how contexts are batched.
        """
        stream = Stream(spec.stream) if stream is None else stream
        T = n_frames or self.n_frames
        if T > self.model.cfg.max_frames:
            raise ShapeError(f"{T} frames exceed the configured maximum {self.model.cfg.max_frames}")
        steps = ddim_timesteps(self.schedule.n_steps, spec.ddim_steps)
        out = []
        for lo in range(0, len(contexts), BATCH):
            chunk = list(contexts[lo:lo + BATCH])
            z = torch.stack([stream.split(lo + i).normal((T, FRAME_DIM)) for i in range(len(chunk))])
            cons = self._constraints(chunk, T, known, known_mask, lo, use_goal)
            cond, null = self.conditions(chunk)
            data = self._run(z, steps, cond, null, spec.guidance, cons)
            out.extend(ModelMotion(d, np.ones(T, dtype=bool)) for d in data)
        return out

    def _constraints(self, chunk, T, known, known_mask, lo, use_goal) -> Constraints:
        need = None
        if use_goal and any(c.goal is not None for c in chunk):
            need = torch.tensor(np.stack([
                c.goal_offset if c.goal is not None else np.full(3, np.nan) for c in chunk]))
        cons = Constraints(need)
        if known is not None:
            cons.known = torch.as_tensor(known[lo:lo + len(chunk)])
            cons.known_mask = torch.as_tensor(known_mask[lo:lo + len(chunk)])
        return cons

    @torch.no_grad()
    def reconstruct(self, motions: Sequence[ModelMotion], k_start: int, ddim_steps: int,
                    streams: Sequence[Stream], contexts: Sequence[GenerationContext] | None = None
                    ) -> list[np.ndarray]:
        """Noise each motion to step ``k_start`` and denoise it back.

        Motion ``i`` draws its noise from ``streams[i]``. Frames outside a
        motion's mask enter the network as mask tokens.
        """
        steps = ddim_timesteps(self.schedule.n_steps, ddim_steps, k_max=k_start)
        out = []
        for lo in range(0, len(motions), BATCH):
            chunk = motions[lo:lo + BATCH]
            x = torch.tensor(np.stack([m.data for m in chunk]), dtype=torch.float32)
            mask = torch.tensor(np.stack([m.mask for m in chunk]))
            noise = torch.stack([s.normal(x.shape[1:]) for s in streams[lo:lo + BATCH]])
            z_k = q_sample(self.scaler.normalize(x), k_start, noise, self.schedule)
            if contexts is None:
                cond = null = self.model.null_context(len(chunk))
            else:
                cond, null = self.conditions(contexts[lo:lo + BATCH])
            out.extend(self._run(z_k, steps, cond, null, 1.0, Constraints(), mask))
        return out


def decode_all(motions: Sequence[ModelMotion], starts) -> list[Motion]:
    return [decode_model_space(m, s) for m, s in zip(motions, starts)]


ContextFn = Callable[[int, np.ndarray], GenerationContext]


def _context_fn(contexts) -> ContextFn:
    if callable(contexts):
        return contexts
    contexts = list(contexts)
    return lambda i, start: dataclasses.replace(contexts[i], start=np.asarray(start, dtype=np.float64))


def _positions(seq: np.ndarray, t1) -> np.ndarray:
    return np.asarray(t1) + np.cumsum(seq[:, :VEL_DIM], axis=0)


def stitch_long_horizon(generator: MotionGenerator, contexts, intervals: int, overlap: int,
                        spec: SampleSpec = SampleSpec(), stream: Stream | None = None,
                        renoise_frac: float = 0.25, smooth: bool = True) -> Motion:
    """Generate ``intervals`` consecutive windows and join them.

    Each window after the first is sampled with its first ``overlap`` frames
    fixed to the last ``overlap`` frames generated so far. A band of
    ``overlap`` frames centered on the seam is then re-noised to
    ``renoise_frac * K`` and denoised with the surrounding frames fixed.
    Overlapping frames appear once in the result.

    Args:
        contexts: a sequence with one context per interval (its start is
            replaced by the actual start), or ``f(i, start) -> context``.
    """
    T = generator.n_frames
    if overlap >= T:
        raise ValueError("overlap must be shorter than an interval")
    if overlap < 1 and intervals > 1:
        raise ValueError("overlap must be at least one frame")
    stream = Stream(spec.stream) if stream is None else stream
    ctx_fn = _context_fn(contexts)
    ctx0 = ctx_fn(0, None) if callable(contexts) else list(contexts)[0]
    t1 = np.asarray(ctx0.start, dtype=np.float64)
    seq = generator.sample([ctx0], spec, stream)[0].data

    for i in range(1, intervals):
        sub = stream.split("interval", i)
        b = len(seq)
        start_idx = b - overlap
        pos = _positions(seq, t1)
        known = np.zeros((1, T, FRAME_DIM))
        known[0, :overlap] = seq[start_idx:]
        known[0, 0, :VEL_DIM] = 0
        known_mask = np.zeros((1, T), dtype=bool)
        known_mask[0, :overlap] = True
        ctx = ctx_fn(i, pos[start_idx])
        new = generator.sample([ctx], spec, sub, known=known, known_mask=known_mask)[0].data
        seq = np.concatenate((seq, new[overlap:]))
        if smooth:
            half = overlap // 2
            hi = min(b + overlap - half, len(seq))
            seq = _smooth_transition(generator, seq, t1, b - half, hi, ctx_fn, i, spec, sub, renoise_frac)
    return decode_model_space(ModelMotion(seq, np.ones(len(seq), dtype=bool)), t1)


def _smooth_transition(generator, seq, t1, lo, hi, ctx_fn, i, spec, stream, renoise_frac):
    """Re-noise frames ``[lo, hi)`` of ``seq`` and denoise them inside a T-frame window."""
    T = generator.n_frames
    ws = int(np.clip(lo - (T - (hi - lo)) // 2, 0, len(seq) - T))
    window = seq[ws:ws + T].copy()
    first_vel = window[0, :VEL_DIM].copy()
    window[0, :VEL_DIM] = 0
    known_mask = np.ones(T, dtype=bool)
    known_mask[lo - ws:hi - ws] = False
    known_mask[0] = True
    pos = _positions(seq, t1)
    ctx = ctx_fn(i, pos[ws])
    k_start = max(1, int(round(renoise_frac * generator.schedule.n_steps)))
    steps = ddim_timesteps(generator.schedule.n_steps, spec.ddim_steps, k_max=k_start)
    x = torch.tensor(window[None], dtype=torch.float32)
    noise = stream.split("transition").normal(x.shape)
    z_k = q_sample(generator.scaler.normalize(x), k_start, noise, generator.schedule)
    cons = Constraints(known=torch.tensor(window[None]), known_mask=torch.tensor(known_mask[None]))
    cond, null = generator.conditions([ctx])
    out = generator._run(z_k, steps, cond, null, spec.guidance, cons)[0]
    out[0, :VEL_DIM] = first_vel
    seq = seq.copy()
    seq[ws:ws + T] = out
    return seq
