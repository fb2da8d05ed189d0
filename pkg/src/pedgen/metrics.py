"""Displacement and physical-plausibility metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError
from .motion import Motion
from .scene import EMPTY, WALKABLE, VoxelGrid
from .skeleton import FOOT_JOINTS, Skeleton

FLOAT_THRESHOLD = 0.2
VIOLATING_FRAME_FRACTION = 0.5


def _check_preds(preds: Sequence[Motion]) -> None:
    if len(preds) == 0:
        raise ValueError("at least one prediction is required")


def per_prediction_displacement(gt: Motion, preds: Sequence[Motion], skeleton: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    """ADE and FDE of every prediction, over all joints in the global frame."""
    _check_preds(preds)
    g = gt.joints(skeleton)
    ade, fde = [], []
    for p in preds:
        if p.n_frames != gt.n_frames:
            raise ShapeError("prediction and ground truth frame counts differ")
        err = np.linalg.norm(p.joints(skeleton) - g, axis=-1).mean(-1)
        ade.append(err.mean())
        fde.append(err[-1])
    return np.array(ade), np.array(fde)


def displacement_errors(gt: Motion, preds: Sequence[Motion], skeleton: Skeleton) -> tuple[float, float, float, float]:
    """(mADE, aADE, mFDE, aFDE)."""
    ade, fde = per_prediction_displacement(gt, preds, skeleton)
    return float(ade.min()), float(ade.mean()), float(fde.min()), float(fde.mean())


def collision_frames(m: Motion, grid: VoxelGrid, skeleton: Skeleton, walkable=WALKABLE) -> np.ndarray:
    """(T,) true where any joint lies in an occupied, non-walkable voxel."""
    joints = m.joints(skeleton)
    cls = grid.lookup(joints.reshape(-1, 3)).reshape(joints.shape[:2])
    bad = (cls != EMPTY) & ~np.isin(cls, walkable)
    return bad.any(-1)


def collision_rates(preds: Sequence[Motion], grids, skeleton: Skeleton, walkable=WALKABLE) -> tuple[float, float]:
    """(per-sequence, per-frame) collision rates. ``grids`` is one grid or one per prediction."""
    _check_preds(preds)
    grids = [grids] * len(preds) if isinstance(grids, VoxelGrid) else list(grids)
    frames = [collision_frames(m, g, skeleton, walkable) for m, g in zip(preds, grids)]
    return float(np.mean([f.any() for f in frames])), float(np.concatenate(frames).mean())


def collision_rate(preds: Sequence[Motion], grid, skeleton: Skeleton, walkable=WALKABLE) -> float:
    return collision_rates(preds, grid, skeleton, walkable)[0]


GroundFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def floating_frames(m: Motion, ground_height_fn: GroundFn, skeleton: Skeleton,
                    threshold: float = FLOAT_THRESHOLD) -> np.ndarray:
    """(T,) true where both feet are farther than ``threshold`` from the ground under the root."""
    joints = m.joints(skeleton)
    ground = np.asarray(ground_height_fn(m.trans[:, 0], m.trans[:, 2]), dtype=np.float64)
    feet = joints[:, list(FOOT_JOINTS), 1]
    return np.abs(feet - np.reshape(ground, (-1, 1))).min(-1) > threshold


def foot_floating_rates(preds: Sequence[Motion], ground_height_fns, skeleton: Skeleton,
                        threshold: float = FLOAT_THRESHOLD) -> tuple[float, float]:
    """(per-sequence, per-frame) foot floating rates.

    A sequence violates when more than half of its frames do.
    ``ground_height_fns`` is one function or one per prediction.
    """
    _check_preds(preds)
    fns = [ground_height_fns] * len(preds) if callable(ground_height_fns) else list(ground_height_fns)
    frames = [floating_frames(m, f, skeleton, threshold) for m, f in zip(preds, fns)]
    per_seq = [f.mean() > VIOLATING_FRAME_FRACTION for f in frames]
    return float(np.mean(per_seq)), float(np.concatenate(frames).mean())


def foot_floating_rate(preds: Sequence[Motion], ground_height_fn, skeleton: Skeleton,
                       threshold: float = FLOAT_THRESHOLD) -> float:
    return foot_floating_rates(preds, ground_height_fn, skeleton, threshold)[0]


def flat_ground(height: float = 0.0) -> GroundFn:
    return lambda x, z: np.full(np.shape(x), height, dtype=np.float64)


@dataclass
class MetricReport:
    mADE: float
    aADE: float
    mFDE: float
    aFDE: float
    CR: float
    FFR: float
    CR_frames: float
    FFR_frames: float
    samples_per_datum: int
    n_data: int

    def __post_init__(self):
        eps = 1e-12
        if self.mADE > self.aADE + eps or self.mFDE > self.aFDE + eps:
            raise ValueError("minimum errors cannot exceed mean errors")
        for name in ("CR", "FFR", "CR_frames", "FFR_frames"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        rows = [("mADE", self.mADE), ("aADE", self.aADE), ("mFDE", self.mFDE), ("aFDE", self.aFDE),
                ("CR", self.CR), ("FFR", self.FFR), ("CR (frames)", self.CR_frames),
                ("FFR (frames)", self.FFR_frames)]
        lines = [f"{'metric':<14}{'value':>10}", "-" * 24]
        lines += [f"{name:<14}{value:>10.4f}" for name, value in rows]
        lines.append(f"{'samples/datum':<14}{self.samples_per_datum:>10d}")
        lines.append(f"{'data':<14}{self.n_data:>10d}")
        return "\n".join(lines) + "\n"


def evaluate(gts: Sequence[Motion], preds: Sequence[Sequence[Motion]], grids, ground_fns,
             skeletons: Sequence[Skeleton]) -> MetricReport:
    """Average the displacement metrics over data; pool plausibility over all predictions."""
    if len(gts) == 0:
        raise ValueError("nothing to evaluate")
    disp = np.array([displacement_errors(g, p, s) for g, p, s in zip(gts, preds, skeletons)])
    cr_seq, cr_fr, ff_seq, ff_fr = [], [], [], []
    for p, grid, fn, s in zip(preds, grids, ground_fns, skeletons):
        cs, cf = collision_rates(p, grid, s) if grid is not None else (0.0, 0.0)
        fs, ff = foot_floating_rates(p, fn, s)
        cr_seq.append(cs), cr_fr.append(cf), ff_seq.append(fs), ff_fr.append(ff)
    m = disp.mean(0)
    return MetricReport(float(m[0]), float(m[1]), float(m[2]), float(m[3]),
                        float(np.mean(cr_seq)), float(np.mean(ff_seq)),
                        float(np.mean(cr_fr)), float(np.mean(ff_fr)),
                        len(preds[0]), len(gts))
