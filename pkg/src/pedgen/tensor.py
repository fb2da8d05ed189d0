"""Gradient evaluation, gradient clipping and the Adam optimizer.

Tensors and reverse-mode differentiation come from torch (define-by-run
autograd). This module adds the contracts the training loop relies on: finite
checks, global-norm clipping that is idempotent, and an Adam step with
decoupled weight decay and a stepwise learning-rate decay.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch

from .errors import NonFiniteError, ShapeError

Params = Mapping[str, torch.Tensor]


def evaluate_with_gradients(
    loss_fn: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    params: Params,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Evaluate ``loss_fn(params)`` and its reverse-mode gradient.

    The graph is rebuilt on every call. ``params`` are copied into leaf tensors,
    so the caller's tensors are never mutated.

    Returns:
        The scalar loss and a dict of gradients shaped like ``params``.

    Raises:
        ShapeError: the loss is not a scalar, or an op saw mismatched shapes.
        NonFiniteError: the loss or a gradient is NaN or infinite.
    """
    leaves = {name: p.detach().clone().requires_grad_(True) for name, p in params.items()}
    try:
        loss = loss_fn(leaves)
    except RuntimeError as exc:
        if "size" in str(exc) or "shape" in str(exc):
            raise ShapeError(str(exc)) from exc
        raise
    if loss.numel() != 1:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    out = {}
    for (name, leaf), g in zip(leaves.items(), grads):
        g = torch.zeros_like(leaf) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name!r}")
        out[name] = g.detach()
    return loss.item(), out


def global_norm(tensors: Params) -> float:
    total = 0.0
    for name in sorted(tensors):
        total += float(torch.sum(tensors[name].double() ** 2))
    return math.sqrt(total)


def clip_gradients(grads: Params, max_norm: float) -> dict[str, torch.Tensor]:
    """Rescale ``grads`` so their global L2 norm does not exceed ``max_norm``.

    Gradients already within the bound come back unchanged (same values), which
    makes clipping idempotent.
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name!r}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    # (g * max_norm) / norm rounds exactly for simple cases like [3, 4] -> [0.6, 0.8]
    scale_num, scale_den = max_norm, norm
    clipped = {k: g * scale_num / scale_den for k, g in grads.items()}
    while global_norm(clipped) > max_norm:
        scale_num *= 1.0 - 4 * torch.finfo(torch.float32).eps
        clipped = {k: g * scale_num / scale_den for k, g in grads.items()}
    return clipped


def lr_at_epoch(initial: float, epoch: int, factor: float = 0.9, every: int = 75) -> float:
    """Stepwise decay: ``initial * factor ** (epoch // every)``."""
    return initial * factor ** (epoch // every)


@dataclass
class AdamState:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-7
    decay_factor: float = 0.9
    decay_every: int = 75
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def lr_for_epoch(self, epoch: int) -> float:
        return lr_at_epoch(self.lr, epoch, self.decay_factor, self.decay_every)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"adam.m.{k}": v for k, v in self.exp_avg.items()}
        out.update({f"adam.v.{k}": v for k, v in self.exp_avg_sq.items()})
        return out


@torch.no_grad()
def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Params,
    state: AdamState,
    epoch: int = 0,
) -> tuple[Mapping[str, torch.Tensor], AdamState]:
    """One Adam update with decoupled weight decay, applied in place.

    The effective learning rate is ``state.lr_for_epoch(epoch)``.
    """
    lr = state.lr_for_epoch(epoch)
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if state.weight_decay:
            p.mul_(1.0 - lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state
