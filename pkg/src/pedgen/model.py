"""Denoising transformer and context encoder.

Every frame enters the transformer as two tokens, a velocity token and a
rotation token (root + 23 joints in 6D). The diffusion step and the context
embedding modulate each sub-module through FiLM. Scene voxels are read by a
single cross-attention layer whose tokens are the 40 x 40 horizontal columns of
the grid, with the 40 vertical cells as features.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ShapeError
from .motion import FRAME_DIM, ROT_DIM, VEL_DIM
from .scene import EMPTY, GRID_DIMS, N_CLASSES, VoxelGrid, rotate_grid
from .skeleton import N_BETAS


@dataclass
class DenoiserConfig:
    n_blocks: int = 2
    dim: int = 64
    heads: int = 4
    ff_mult: int = 2
    max_frames: int = 60
    use_scene: bool = False
    use_shape: bool = False
    use_goal: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("latent dim must be divisible by the head count")
        if self.dim % 4:
            raise ValueError("latent dim must be divisible by 4 for the 2D position code")

    @property
    def factors(self) -> tuple[str, ...]:
        names = (("scene", self.use_scene), ("human", self.use_shape), ("goal", self.use_goal))
        return tuple(n for n, on in names if on)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GenerationContext:
    voxel: VoxelGrid | None
    beta: np.ndarray
    start: np.ndarray
    goal: np.ndarray | None = None

    @property
    def goal_offset(self) -> np.ndarray:
        return np.zeros(3) if self.goal is None else np.asarray(self.goal) - np.asarray(self.start)


@dataclass
class ContextBatch:
    """Collated contexts. Voxel grids are stored as vertical runs of one class."""

    size: int
    run_col: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))
    run_lo: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))
    run_hi: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))
    beta: torch.Tensor | None = None
    goal_offset: torch.Tensor | None = None
    has_goal: torch.Tensor | None = None


def voxel_runs(classes: np.ndarray) -> np.ndarray:
    """Vertical runs of equal non-empty class: rows ``(column, y_first, y_last, class)``.

    Columns are numbered ``x * Z + z``.
    """
    X, Y, Z = classes.shape
    cols = classes.transpose(0, 2, 1).reshape(X * Z, Y).astype(np.int64)
    change = np.ones_like(cols, dtype=bool)
    change[:, 1:] = cols[:, 1:] != cols[:, :-1]
    last = np.ones_like(cols, dtype=bool)
    last[:, :-1] = cols[:, 1:] != cols[:, :-1]
    filled = cols != EMPTY
    c0, y0 = np.nonzero(change & filled)
    _, y1 = np.nonzero(last & filled)
    # both scans are row-major, so the k-th start pairs with the k-th end
    return np.stack((c0, y0, y1, cols[c0, y0]), axis=1)


def collate_contexts(contexts, angles=None, voxels: bool = True) -> ContextBatch:
    """Build a :class:`ContextBatch`; ``angles`` rotates each voxel grid first.

    ``voxels=False`` skips the grids for models without a scene encoder.
    """
    n_cols = GRID_DIMS[0] * GRID_DIMS[2]
    cols, los, his = [], [], []
    for b, ctx in enumerate(contexts):
        if ctx.voxel is None or not voxels:
            continue
        grid = ctx.voxel
        if grid.dims != GRID_DIMS:
            raise ShapeError(f"voxel grid must be {GRID_DIMS}, got {grid.dims}")
        if angles is not None and angles[b] != 0.0:
            grid = rotate_grid(grid, float(angles[b]))
        runs = voxel_runs(grid.classes)
        runs = runs[runs[:, 3] < N_CLASSES]
        cols.append(runs[:, 0] + b * n_cols)
        los.append(runs[:, 1] * N_CLASSES + runs[:, 3])
        his.append((runs[:, 2] + 1) * N_CLASSES + runs[:, 3])

    def cat(xs):
        return torch.from_numpy(np.concatenate(xs)) if xs else torch.zeros(0, dtype=torch.long)

    beta = torch.tensor(np.stack([np.asarray(c.beta, dtype=np.float32) for c in contexts]))
    offsets = np.stack([c.goal_offset for c in contexts]).astype(np.float32)
    if angles is not None:
        ca, sa = np.cos(angles), np.sin(angles)
        x, z = offsets[:, 0].copy(), offsets[:, 2].copy()
        offsets[:, 0] = ca * x + sa * z
        offsets[:, 2] = -sa * x + ca * z
    has_goal = torch.tensor([c.goal is not None for c in contexts])
    return ContextBatch(len(contexts), cat(cols), cat(los), cat(his), beta,
                        torch.from_numpy(offsets), has_goal)


def sinusoidal(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer sinusoids, (...,) -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = positions.double()[..., None] * freqs
    return torch.cat((torch.sin(angles), torch.cos(angles)), dim=-1).float()


def _column_positions(dim: int) -> torch.Tensor:
    X, _, Z = GRID_DIMS
    ix, iz = torch.meshgrid(torch.arange(X), torch.arange(Z), indexing="ij")
    return torch.cat((sinusoidal(ix.reshape(-1), dim // 2), sinusoidal(iz.reshape(-1), dim // 2)), dim=-1)


class ContextEncoder(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        D, self.heads = cfg.dim, cfg.heads
        self.cfg = cfg
        if cfg.use_scene:
            Y = GRID_DIMS[1]
            self.cell_embed = nn.Parameter(torch.randn(Y, N_CLASSES, D) / math.sqrt(Y))
            self.register_buffer("column_pos", _column_positions(D), persistent=False)
            self.query = nn.Parameter(torch.randn(D) / math.sqrt(D))
            self.q_proj = nn.Linear(D, D)
            self.k_weight = nn.Parameter(torch.randn(D, D) / math.sqrt(D))
            self.v_proj = nn.Linear(D, D)
            self.out_proj = nn.Linear(D, D)
        if cfg.use_shape:
            self.shape_proj = nn.Linear(N_BETAS, D)
        if cfg.use_goal:
            self.goal_proj = nn.Linear(3, D)
            self.no_goal = nn.Parameter(torch.zeros(D))

    @property
    def null_dtype(self):
        return next(self.parameters()).dtype if any(True for _ in self.parameters()) else torch.float32

    def column_features(self, batch: ContextBatch) -> torch.Tensor:
        """(B, 1600, D): per column, the sum over its cells of a (height, class) embedding."""
        D = self.cfg.dim
        dtype = self.cell_embed.dtype
        # prefix[y * C + c] = sum of embeddings of class c over heights below y
        prefix = torch.cat((torch.zeros(N_CLASSES, D, dtype=dtype),
                            torch.cumsum(self.cell_embed, 0).reshape(-1, D)))
        n_cols = GRID_DIMS[0] * GRID_DIMS[2]
        feats = torch.zeros(batch.size * n_cols, D, dtype=dtype)
        if batch.run_col.numel():
            feats = feats.index_add(0, batch.run_col, prefix[batch.run_hi] - prefix[batch.run_lo])
        return feats.view(batch.size, n_cols, D) + self.column_pos.to(dtype)

    def scene_attention(self, feats: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
        """Single-query multi-head cross-attention.

        Keys and values are linear in the features, so the key projection is
        folded into the query and the value projection applied after pooling;
        this is the same function as projecting all 1600 keys and values.
        """
        B, N, D = feats.shape
        H = self.heads
        dh = D // H
        q = self.q_proj(query).view(B, H, dh)
        qk = torch.einsum("bhd,hde->bhe", q, self.k_weight.view(H, dh, D))
        attn = torch.softmax(torch.einsum("bhe,bne->bhn", qk, feats) / math.sqrt(dh), dim=-1)
        pooled = torch.einsum("bhn,bne->bhe", attn, feats)
        v = torch.einsum("bhe,hde->bhd", pooled, self.v_proj.weight.view(H, dh, D))
        v = v + self.v_proj.bias.view(H, dh)
        return self.out_proj(v.reshape(B, D))

    def forward(self, batch: ContextBatch) -> torch.Tensor | None:
        parts = []
        dtype = self.null_dtype
        if self.cfg.use_shape:
            parts.append(self.shape_proj(batch.beta.to(dtype)))
        if self.cfg.use_goal:
            goal = self.goal_proj(batch.goal_offset.to(dtype))
            parts.append(torch.where(batch.has_goal[:, None], goal, self.no_goal))
        if self.cfg.use_scene:
            query = self.query.expand(batch.size, -1)
            if parts:
                query = query + sum(parts)
            parts.append(self.scene_attention(self.column_features(batch), query))
        return sum(parts) if parts else None


class FiLM(nn.Module):
    """``y * (1 + scale) + shift`` with (scale, shift) a linear map of the condition."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, 2 * dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, y, cond):
        scale, shift = self.proj(cond).unsqueeze(1).chunk(2, dim=-1)
        return y * (1 + scale) + shift


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        D = cfg.dim
        self.norm1 = nn.LayerNorm(D)
        self.attn = nn.MultiheadAttention(D, cfg.heads, batch_first=True)
        self.film1 = FiLM(D)
        self.norm2 = nn.LayerNorm(D)
        self.mlp = nn.Sequential(nn.Linear(D, cfg.ff_mult * D), nn.GELU(), nn.Linear(cfg.ff_mult * D, D))
        self.film2 = FiLM(D)

    def forward(self, h, cond=None):
        a = self.norm1(h)
        a = self.attn(a, a, a, need_weights=False)[0]
        h = h + (a if cond is None else self.film1(a, cond))
        m = self.mlp(self.norm2(h))
        return h + (m if cond is None else self.film2(m, cond))


class Denoiser(nn.Module):
    """Predicts the clean motion from a noised one: ``F(x^k, k, c)``."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.dim
        self.context = ContextEncoder(cfg)
        self.null_embedding = nn.Parameter(torch.zeros(D))
        self.vel_in = nn.Linear(VEL_DIM, D)
        self.rot_in = nn.Linear(ROT_DIM, D)
        self.token_type = nn.Parameter(torch.randn(2, D) * 0.02)
        self.mask_embedding = nn.Parameter(torch.randn(D) * 0.02)
        self.step_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_blocks))
        self.norm_out = nn.LayerNorm(D)
        self.vel_out = nn.Linear(D, VEL_DIM)
        self.rot_out = nn.Linear(D, ROT_DIM)
        for lin in (self.vel_out, self.rot_out):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.register_buffer("trained_steps", torch.zeros((), dtype=torch.long))

    def encode_context(self, batch: ContextBatch, drop: torch.Tensor | None = None) -> torch.Tensor:
        """Condition embedding per sample; dropped (or context-free) samples get the null embedding."""
        c = self.context(batch)
        null = self.null_embedding.expand(batch.size, -1)
        if c is None:
            return null
        if drop is not None:
            c = torch.where(drop[:, None], null, c)
        return c

    def null_context(self, n: int) -> torch.Tensor:
        return self.null_embedding.expand(n, -1)

    def tokens(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T, 147) -> (B, 2T, D) interleaved velocity/rotation tokens.

        Frames with ``mask`` false have both tokens replaced by the mask
        embedding before positions are added.
        """
        B, T, F = x.shape
        if F != FRAME_DIM:
            raise ShapeError(f"frames must have {FRAME_DIM} values, got {F}")
        if T > self.cfg.max_frames:
            raise ShapeError(f"{T} frames exceed the configured maximum {self.cfg.max_frames}")
        tok = torch.stack((self.vel_in(x[..., :VEL_DIM]), self.rot_in(x[..., VEL_DIM:])), dim=2)
        if mask is not None:
            tok = torch.where(mask[:, :, None, None], tok, self.mask_embedding)
        pos = sinusoidal(torch.arange(T), self.cfg.dim).to(tok.dtype)[None, :, None, :]
        tok = tok + pos + self.token_type
        return tok.reshape(B, 2 * T, self.cfg.dim)

    def forward(self, x, k, c, mask=None, film: bool = True):
        """
        Args:
            x: (B, T, 147) noised motion in the normalized model space.
            k: (B,) diffusion steps.
            c: (B, D) condition embeddings.
            mask: (B, T) frames with labels; None means all frames.
            film: False runs the blocks without conditioning.
        """
        B, T, _ = x.shape
        h = self.tokens(x, mask)
        cond = None
        if film:
            k = torch.as_tensor(k).reshape(-1).expand(B)
            step = sinusoidal(k, self.cfg.dim).to(x.dtype)
            cond = torch.nn.functional.silu(self.step_mlp(step) + c)
        for block in self.blocks:
            h = block(h, cond)
        h = self.norm_out(h).view(B, T, 2, self.cfg.dim)
        return torch.cat((self.vel_out(h[:, :, 0]), self.rot_out(h[:, :, 1])), dim=-1)
