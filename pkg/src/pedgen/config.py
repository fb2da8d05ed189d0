"""Run configuration: ``key = value`` text with defaults and flag overrides.

Precedence is defaults, then the config file, then command-line flags.
Blank lines and ``#`` comments are ignored; unknown keys and out-of-range
values are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Mapping

from .diffusion import LossWeights, SampleSpec
from .errors import ConfigError
from .labels import FilterPolicy
from .model import DenoiserConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # diffusion
    k_steps: int = 1000
    ddim_steps: int = 100
    guidance: float = 1.0
    cond_drop: float = 0.2
    w_rec: float = 1.0
    w_traj: float = 1.0
    w_geo: float = 1.0
    # optimizer
    lr: float = 4e-4
    weight_decay: float = 1e-7
    lr_decay: float = 0.9
    lr_decay_every: int = 75
    grad_clip: float = 1.0
    batch_size: int = 256
    epochs: int = 500
    max_steps: int = 0  # 0: no cap
    augment_rotation: bool = True
    # model
    n_blocks: int = 2
    dim: int = 64
    heads: int = 4
    ff_mult: int = 2
    use_scene: bool = True
    use_shape: bool = True
    use_goal: bool = True
    # data and voxel geometry (the encoder is built for this grid)
    frames: int = 60
    voxel_grid: int = 40
    voxel_cell_xz: float = 0.2
    voxel_cell_y: float = 0.1
    min_labelled_frames: int = 30
    # anomaly filter
    filter_depth: int = 0  # 0: half of k_steps
    filter_threshold: float = 10.0
    filter_iterations: int = 2
    filter_quantile: float = 0.95
    filter_finetune_steps: int = 0  # 0: same budget as the first iteration
    # generation and evaluation
    n_samples: int = 50  # generated motions per context
    stitch_overlap: int = 10
    stitch_renoise: float = 0.25
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("k_steps", self.k_steps >= 1),
            ("ddim_steps", 1 <= self.ddim_steps <= self.k_steps),
            ("guidance", self.guidance >= 0),
            ("cond_drop", 0.0 <= self.cond_drop <= 1.0),
            ("w_rec", self.w_rec >= 0), ("w_traj", self.w_traj >= 0), ("w_geo", self.w_geo >= 0),
            ("lr", self.lr > 0), ("weight_decay", self.weight_decay >= 0),
            ("lr_decay", 0.0 < self.lr_decay <= 1.0), ("lr_decay_every", self.lr_decay_every >= 1),
            ("grad_clip", self.grad_clip > 0), ("batch_size", self.batch_size >= 1),
            ("epochs", self.epochs >= 1), ("max_steps", self.max_steps >= 0),
            ("n_blocks", self.n_blocks >= 1), ("dim", self.dim >= 4 and self.dim % 4 == 0),
            ("heads", self.heads >= 1 and self.dim % self.heads == 0), ("ff_mult", self.ff_mult >= 1),
            ("frames", self.frames >= 2),
            ("voxel_grid", self.voxel_grid == 40),
            ("voxel_cell_xz", self.voxel_cell_xz == 0.2), ("voxel_cell_y", self.voxel_cell_y == 0.1),
            ("min_labelled_frames", self.min_labelled_frames >= 1),
            ("filter_depth", 0 <= self.filter_depth <= self.k_steps),
            ("filter_threshold", self.filter_threshold > 0),
            ("filter_iterations", self.filter_iterations >= 1),
            ("filter_quantile", 0.0 < self.filter_quantile <= 1.0),
            ("filter_finetune_steps", self.filter_finetune_steps >= 0),
            ("n_samples", self.n_samples >= 1),
            ("stitch_overlap", 1 <= self.stitch_overlap < self.frames),
            ("stitch_renoise", 0.0 < self.stitch_renoise <= 1.0),
            ("seed", self.seed >= 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"{name} = {getattr(self, name)!r} is out of range")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    # views used by the library
    def denoiser(self, factors: bool = True) -> DenoiserConfig:
        return DenoiserConfig(self.n_blocks, self.dim, self.heads, self.ff_mult, self.frames,
                              factors and self.use_scene, factors and self.use_shape, factors and self.use_goal)

    def training(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.weight_decay, self.lr_decay,
                           self.lr_decay_every, self.grad_clip, self.cond_drop,
                           LossWeights(self.w_rec, self.w_traj, self.w_geo), self.augment_rotation,
                           self.max_steps or None)

    def sampling(self) -> SampleSpec:
        return SampleSpec(self.ddim_steps, self.guidance, self.seed)

    def filter_policy(self) -> FilterPolicy:
        depth = self.filter_depth or max(1, self.k_steps // 2)
        return FilterPolicy(depth, self.filter_threshold, self.filter_iterations, self.ddim_steps)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _convert(key: str, raw: str):
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def parse_config(text: str = "", overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Resolve defaults <- ``text`` <- ``overrides`` (both as raw strings)."""
    values = parse_text(text)
    values.update(overrides or {})
    unknown = sorted(set(values) - set(FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return RunConfig(**{k: _convert(k, v) for k, v in values.items()})


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
