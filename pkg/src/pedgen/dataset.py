"""JSONL datasets with voxel binaries beside them.

One record per line::

    {id, fps, frames, start[3], goal[3] | null, beta[10], trans[T][3],
     root_orient_aa[T][3], body_pose_aa[T][23][3], mask[T], voxel_path,
     ground_height}

Rotations are stored as axis-angle vectors. ``voxel_path`` is relative to the
JSONL file's directory (or null for records without a scene).
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError
from .labels import LabelRecord
from .model import GenerationContext
from .motion import FPS, Motion
from .rotations import axis_angle_from_matrix, matrix_from_axis_angle
from .scene import read_voxel, write_voxel
from .skeleton import N_BETAS, N_BODY_JOINTS

VOXEL_DIR = "voxels"


def _dumps(d: dict) -> str:
    return json.dumps(d, separators=(",", ":"))


def record_to_dict(rec: LabelRecord, voxel_path: str | None) -> dict:
    m, ctx = rec.motion, rec.context
    d = {
        "id": rec.id,
        "fps": FPS,
        "frames": m.n_frames,
        "start": np.asarray(ctx.start, dtype=np.float64).tolist(),
        "goal": None if ctx.goal is None else np.asarray(ctx.goal, dtype=np.float64).tolist(),
        "beta": np.asarray(ctx.beta, dtype=np.float64).tolist(),
        "trans": m.trans.tolist(),
        "root_orient_aa": axis_angle_from_matrix(m.root_orient).tolist(),
        "body_pose_aa": axis_angle_from_matrix(m.body_pose).tolist(),
        "mask": m.mask.tolist(),
        "voxel_path": voxel_path,
        "ground_height": float(rec.ground_height),
    }
    if rec.score is not None:
        d["score"] = rec.score
    if rec.verdict is not None:
        d["verdict"] = rec.verdict
    return d


def record_from_dict(d: dict, base: Path | None = None, load_voxel: bool = True) -> LabelRecord:
    T = int(d["frames"])
    trans = np.asarray(d["trans"], dtype=np.float64)
    root = matrix_from_axis_angle(np.asarray(d["root_orient_aa"], dtype=np.float64))
    body = matrix_from_axis_angle(np.asarray(d["body_pose_aa"], dtype=np.float64))
    if trans.shape != (T, 3) or body.shape != (T, N_BODY_JOINTS, 3, 3):
        raise ShapeError(f"record {d.get('id')}: arrays do not match {T} frames")
    beta = np.asarray(d["beta"], dtype=np.float64)
    if beta.shape != (N_BETAS,):
        raise ShapeError(f"record {d.get('id')}: beta must have {N_BETAS} entries")
    motion = Motion(trans, root, body, np.asarray(d["mask"], dtype=bool))
    voxel = None
    if load_voxel and d.get("voxel_path"):
        p = Path(d["voxel_path"])
        voxel = read_voxel(p if base is None or p.is_absolute() else base / p)
    goal = None if d.get("goal") is None else np.asarray(d["goal"], dtype=np.float64)
    ctx = GenerationContext(voxel, beta, np.asarray(d["start"], dtype=np.float64), goal)
    return LabelRecord(str(d["id"]), motion, ctx, float(d.get("ground_height", 0.0)),
                       d.get("score"), d.get("verdict"))


def write_dataset(path, records: Iterable[LabelRecord], write_voxels: bool = True) -> None:
    """Write records to ``path`` and their voxel grids to ``voxels/`` beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        rel = None
        if write_voxels and rec.context.voxel is not None:
            rel = f"{VOXEL_DIR}/{rec.id}.pgvx"
            (path.parent / VOXEL_DIR).mkdir(exist_ok=True)
            write_voxel(path.parent / rel, rec.context.voxel)
        lines.append(_dumps(record_to_dict(rec, rel)))
    path.write_text("".join(line + "\n" for line in lines))


def read_dataset(path, load_voxels: bool = True) -> list[LabelRecord]:
    path = Path(path)
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}:{n}: malformed JSON") from e
        out.append(record_from_dict(d, path.parent, load_voxels))
    return out


def write_verdicts(path, records: Sequence[LabelRecord]) -> None:
    """Sidecar with one ``{id, score, verdict, iteration}`` line per record."""
    lines = []
    for r in records:
        it = None
        if r.verdict and r.verdict.startswith("dropped@"):
            it = int(r.verdict.split("@")[1])
        lines.append(_dumps({"id": r.id, "score": r.score, "verdict": r.verdict, "iteration": it}))
    Path(path).write_text("".join(line + "\n" for line in lines))
