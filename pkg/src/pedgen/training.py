"""Training loop for the motion denoiser."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .diffusion import DiffusionSchedule, LossWeights, q_sample, training_loss
from .errors import NonFiniteError
from .labels import LabelRecord
from .model import Denoiser, DenoiserConfig, collate_contexts
from .motion import VEL_DIM, encode_model_space
from .pipeline import MotionGenerator, MotionScaler
from .rng import Stream
from .rotations import yaw_matrix
from .skeleton import offsets_from_shape
from .tensor import AdamState, adam_step, clip_gradients


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 256
    lr: float = 4e-4
    weight_decay: float = 1e-7
    lr_decay: float = 0.9
    lr_decay_every: int = 75
    grad_clip: float = 1.0
    cond_drop: float = 0.2
    weights: LossWeights = field(default_factory=LossWeights)
    augment_rotation: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if not 0.0 <= self.cond_drop <= 1.0:
            raise ValueError("condition-drop probability must lie in [0, 1]")
        if not self.lr > 0 or not self.grad_clip > 0:
            raise ValueError("learning rate and clip norm must be positive")


@dataclass
class TrainingData:
    """Records converted once into model-space arrays."""

    x: torch.Tensor  # (N, T, 147) raw model space
    mask: torch.Tensor  # (N, T)
    beta: torch.Tensor  # (N, 10)
    records: list[LabelRecord]

    @classmethod
    def from_records(cls, records: Sequence[LabelRecord]) -> TrainingData:
        mms = [encode_model_space(r.motion) for r in records]
        x = torch.tensor(np.stack([m.data for m in mms]), dtype=torch.float32)
        mask = torch.tensor(np.stack([m.mask for m in mms]))
        beta = torch.tensor(np.stack([np.asarray(r.context.beta) for r in records]), dtype=torch.float32)
        return cls(x, mask, beta, list(records))


def rotate_model_motion(x: torch.Tensor, angles: np.ndarray) -> torch.Tensor:
    """Yaw each motion of a (B, T, 147) batch: velocities and root orientation turn."""
    R = torch.tensor(yaw_matrix(angles), dtype=x.dtype)  # (B, 3, 3)
    vel = torch.einsum("bij,btj->bti", R, x[..., :VEL_DIM])
    root = x[..., VEL_DIM:VEL_DIM + 6].reshape(x.shape[0], x.shape[1], 2, 3)
    root = torch.einsum("bij,btcj->btci", R, root).reshape(x.shape[0], x.shape[1], 6)
    return torch.cat((vel, root, x[..., VEL_DIM + 6:]), dim=-1)


Logger = Callable[[dict], None]


def train(records: Sequence[LabelRecord], model_cfg: DenoiserConfig, cfg: TrainConfig,
          schedule: DiffusionSchedule, stream: Stream, init: MotionGenerator | None = None,
          log: Logger | None = None) -> tuple[MotionGenerator, list[dict]]:
    """Train (or fine-tune ``init``) on ``records``.

    Every random draw comes from ``stream``: the batch order of epoch ``e``
    from ``split("epoch", e)`` and the step, noise, condition drop and
    rotation of optimizer step ``s`` from ``split("step", s)``.

    Returns:
        The generator and one history row per optimizer step.
    """
    data = TrainingData.from_records(records)
    N, T, _ = data.x.shape
    if init is None:
        torch.manual_seed(stream.split("init").key % (2**63))
        model = Denoiser(model_cfg)
        scaler = MotionScaler.fit(data.x.numpy(), data.mask.numpy())
    else:
        model, scaler = init.model, init.scaler
    model.train()
    params = dict(model.named_parameters())
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay, decay_factor=cfg.lr_decay,
                      decay_every=cfg.lr_decay_every)
    uses_context = bool(model.cfg.factors)
    uses_scene = model.cfg.use_scene
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = stream.split("epoch", epoch).generator().permutation(N)
        for lo in range(0, N, cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = order[lo:lo + cfg.batch_size]
            B = len(idx)
            g = stream.split("step", step).generator()
            k = torch.from_numpy(g.integers(1, schedule.n_steps + 1, size=B))
            drop = torch.from_numpy(g.uniform(size=B) < cfg.cond_drop)
            angles = g.uniform(0.0, 2 * math.pi, size=B) if cfg.augment_rotation else np.zeros(B)
            noise = stream.split("step", step, "noise").normal((B, T, data.x.shape[-1]))

            x = data.x[idx]
            if cfg.augment_rotation:
                x = rotate_model_motion(x, angles)
            mask = data.mask[idx]
            if uses_context:
                batch = collate_contexts([data.records[i].context for i in idx],
                                         angles if cfg.augment_rotation else None, uses_scene)
                c = model.encode_context(batch, drop)
            else:
                c = model.null_context(B)
            z_k = q_sample(scaler.normalize(x), k, noise, schedule)
            x_hat = scaler.denormalize(model(z_k, k, c, mask))
            loss = training_loss(x, x_hat, offsets_from_shape(data.beta[idx]), cfg.weights, mask)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at step {step}")
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {n: p.grad if p.grad is not None else torch.zeros_like(p) for n, p in params.items()}
            grads = clip_gradients(grads, cfg.grad_clip)
            adam_step({n: p.data for n, p in params.items()}, grads, state, epoch)
            model.trained_steps += 1
            row = {"epoch": epoch, "step": step, "loss": loss.item(), "lr": state.lr_for_epoch(epoch)}
            history.append(row)
            if log is not None:
                log(row)
            step += 1
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    model.eval()
    return MotionGenerator(model, scaler, schedule, T), history


def write_loss_curve(path, history: Sequence[dict]) -> None:
    lines = ["epoch,step,loss,lr"]
    lines += [f"{h['epoch']},{h['step']},{h['loss']!r},{h['lr']!r}" for h in history]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
