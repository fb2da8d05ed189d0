"""Label preparation: camera alignment, partial-label masks and anomaly filtering."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import FilterError, LabelError
from .model import GenerationContext
from .motion import Motion, ModelMotion, encode_model_space
from .pipeline import MotionGenerator
from .rng import Stream
from .rotations import check_rotation

MIN_LABELLED_FRAMES = 30
KEPT = "kept"


@dataclass(frozen=True)
class CameraAlignment:
    """Rigid transform from the global motion frame into a camera frame."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        check_rotation(self.rotation)


def camera_alignment(global_pose, camera_pose) -> CameraAlignment:
    """Transform mapping the global root pose at one frame onto its camera-frame pose.

    Args:
        global_pose: ``(R_g, t_g)`` root orientation and translation in the global frame.
        camera_pose: ``(R_c, t_c)`` the same frame's pose in camera coordinates.
    """
    R_g, t_g = (np.asarray(a, dtype=np.float64) for a in global_pose)
    R_c, t_c = (np.asarray(a, dtype=np.float64) for a in camera_pose)
    check_rotation(R_g)
    check_rotation(R_c)
    R = R_c @ R_g.T
    return CameraAlignment(R, t_c - R @ t_g)


def apply_alignment(a: CameraAlignment, m: Motion) -> Motion:
    """Move translations and root orientations; body rotations are local and unchanged."""
    trans = m.trans @ a.rotation.T + a.translation
    root = a.rotation @ m.root_orient
    return Motion(trans, root, m.body_pose.copy(), m.mask.copy())


def make_partial_mask(present, n_frames: int, min_frames: int = MIN_LABELLED_FRAMES) -> np.ndarray:
    """Boolean mask from 1-based labelled frame indices.

    Raises:
        LabelError: empty or out-of-range indices, or fewer than
            ``min_frames`` labelled frames.
    """
    idx = np.unique(np.asarray(list(present), dtype=np.int64))
    if idx.size == 0:
        raise LabelError("no labelled frames")
    if idx[0] < 1 or idx[-1] > n_frames:
        raise LabelError(f"frame indices must lie in [1, {n_frames}]")
    if idx.size < min_frames:
        raise LabelError(f"{idx.size} labelled frames, at least {min_frames} required")
    mask = np.zeros(n_frames, dtype=bool)
    mask[idx - 1] = True
    return mask


@dataclass
class LabelRecord:
    id: str
    motion: Motion
    context: GenerationContext
    ground_height: float = 0.0
    score: float | None = None
    verdict: str | None = None  # KEPT or "dropped@<iteration>"

    @property
    def mask(self) -> np.ndarray:
        return self.motion.mask

    def model_motion(self) -> ModelMotion:
        return encode_model_space(self.motion)


@dataclass(frozen=True)
class FilterPolicy:
    depth: int = 500  # noising step, K/2 for K = 1000
    threshold: float = 10.0
    iterations: int = 2
    ddim_steps: int = 100

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("noising depth must be at least 1")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.iterations < 1:
            raise ValueError("at least one filtering iteration is required")

    def for_schedule(self, k_steps: int) -> FilterPolicy:
        if self.depth > k_steps:
            raise ValueError(f"noising depth {self.depth} exceeds K = {k_steps}")
        return self


def record_stream(stream: Stream, rec: LabelRecord) -> Stream:
    return stream.split("record", rec.id)


def anomaly_scores(records: Sequence[LabelRecord], gen: MotionGenerator, policy: FilterPolicy,
                   stream: Stream, use_context: bool = False) -> np.ndarray:
    """Reconstruction error of each record after noising to ``policy.depth`` and denoising.

    The error is the squared L2 distance in model space summed over labelled
    frames. Record noise comes from ``stream.split("record", id)``.

    Raises:
        FilterError: the generator has not been trained.
    """
    if not gen.trained:
        raise FilterError("anomaly scoring needs a trained model")
    policy.for_schedule(gen.schedule.n_steps)
    motions = [r.model_motion() for r in records]
    contexts = [r.context for r in records] if use_context else None
    recon = gen.reconstruct(motions, policy.depth, policy.ddim_steps,
                            [record_stream(stream, r) for r in records], contexts)
    return np.array([float((((m.data - x) ** 2).sum(-1) * m.mask).sum()) for m, x in zip(motions, recon)])


def anomaly_score(rec: LabelRecord, gen: MotionGenerator, policy: FilterPolicy, stream: Stream) -> float:
    return float(anomaly_scores([rec], gen, policy, stream)[0])


def calibrate_threshold(clean_scores, quantile: float = 0.95) -> float:
    """Threshold at the given quantile of scores from records known to be clean."""
    scores = np.asarray(clean_scores, dtype=np.float64)
    if scores.size == 0:
        raise FilterError("calibration needs at least one clean score")
    return float(max(np.quantile(scores, quantile), np.finfo(np.float64).tiny))


TrainFn = Callable[[list[LabelRecord], int], MotionGenerator]
ThresholdFn = Callable[[MotionGenerator, int, list[LabelRecord], np.ndarray], float]


def filter_iterate(records: Sequence[LabelRecord], policy: FilterPolicy, train_fn: TrainFn,
                   stream: Stream, threshold_fn: ThresholdFn | None = None,
                   use_context: bool = False) -> tuple[list[LabelRecord], list[list[LabelRecord]]]:
    """Alternate training on the kept records and dropping high-error ones.

    Args:
        train_fn: ``(kept_records, iteration) -> trained generator``.
        stream: scoring noise; record ``r`` uses ``stream.split("record", r.id)``
            in every iteration.
        threshold_fn: optional ``(generator, iteration, kept, scores) ->
            threshold`` replacing ``policy.threshold`` (e.g. a calibrated value).

    Returns:
        The kept records and, per iteration, the records dropped in it.
        Every returned record carries its latest score and its verdict.

    Raises:
        FilterError: ``records`` is empty or every record was dropped.
    """
    if not records:
        raise FilterError("nothing to filter")
    kept = [dataclasses.replace(r) for r in records]
    dropped: list[list[LabelRecord]] = []
    for it in range(1, policy.iterations + 1):
        gen = train_fn(kept, it)
        scores = anomaly_scores(kept, gen, policy, stream, use_context)
        threshold = policy.threshold if threshold_fn is None else threshold_fn(gen, it, kept, scores)
        now_kept, now_dropped = [], []
        for r, s in zip(kept, scores):
            r.score = float(s)
            if s > threshold:
                r.verdict = f"dropped@{it}"
                now_dropped.append(r)
            else:
                r.verdict = KEPT
                now_kept.append(r)
        if not now_kept:
            raise FilterError(f"iteration {it} dropped every record; threshold {threshold:g} is too aggressive")
        kept = now_kept
        dropped.append(now_dropped)
    return kept, dropped
