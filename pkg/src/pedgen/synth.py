"""Procedural street scenes and walking pedestrians.

A scene is a straight street: a sidewalk strip with a road on one side and a
row of buildings (with vegetated gaps) on the other, plus poles along the curb
and parked cars. Layout coordinates are ``u`` along the street and ``w``
across it (road at ``w < 0``, sidewalk ``0 <= w < sidewalk_width``); the
street is placed in the scene frame by ``center`` and ``yaw``.

Pedestrians walk inside a corridor of the sidewalk with a procedural,
phase-locked gait whose stride and speed grow with stature (``beta[0]``).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import PathError, SceneError
from .labels import LabelRecord
from .model import GenerationContext
from .motion import FPS, Motion
from .rng import Stream
from .rotations import matrix_from_axis_angle, random_rotations, yaw_matrix
from .scene import (
    CLASS_ID,
    WALKABLE,
    SemanticPointCloud,
    VoxelGrid,
    build_voxel_grid,
)
from .skeleton import FOOT_JOINTS, N_BETAS, N_BODY_JOINTS, forward_kinematics, skeleton_from_shape

POINT_CAP = 3.0  # obstacle points are sampled up to this height above ground
CLEARANCE = 0.5
ROAD_ON_RIGHT = 0.85
ANOMALY_MODES = ("scramble-pose", "teleport-root", "freeze")


@dataclass(frozen=True)
class Strip:
    cls: int
    w_lo: float
    w_hi: float


@dataclass(frozen=True)
class Box:
    cls: int
    u_lo: float
    u_hi: float
    w_lo: float
    w_hi: float
    height: float


@dataclass(frozen=True)
class SceneSpec:
    strips: tuple[Strip, ...]
    obstacles: tuple[Box, ...] = ()
    corridor: tuple[float, float] = (1.0, 2.0)  # spawn band in w
    ground_height: float = 0.0
    yaw: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)  # (x, z)
    half_length: float = 20.0
    spacing: float = 0.1  # point sampling density (meters between samples)

    def __post_init__(self):
        if not any(s.cls in WALKABLE for s in self.strips):
            raise SceneError("a scene needs at least one walkable strip")
        lo, hi = self.corridor
        if not lo < hi:
            raise SceneError("empty spawn corridor")
        if not any(s.cls in WALKABLE and s.w_lo <= lo and hi <= s.w_hi for s in self.strips):
            raise SceneError("spawn corridor must lie on a walkable strip")
        for b in self.obstacles:
            if b.w_lo < hi and lo < b.w_hi:
                raise SceneError("obstacles must not overlap the spawn corridor")
        if self.spacing <= 0:
            raise SceneError("sampling spacing must be positive")

    @property
    def along(self) -> np.ndarray:
        """Unit street direction in the scene frame."""
        return np.array([np.sin(self.yaw), 0.0, np.cos(self.yaw)])

    @property
    def across(self) -> np.ndarray:
        """Unit direction of increasing ``w`` (from the road toward the buildings)."""
        return np.array([np.cos(self.yaw), 0.0, -np.sin(self.yaw)])

    def to_scene(self, u, w, y=None) -> np.ndarray:
        u, w = np.asarray(u, dtype=np.float64), np.asarray(w, dtype=np.float64)
        y = np.full_like(u, self.ground_height) if y is None else np.asarray(y, dtype=np.float64)
        c = np.array([self.center[0], 0.0, self.center[1]])
        out = c + u[..., None] * self.along + w[..., None] * self.across
        out[..., 1] = y
        return out

    def to_layout(self, xz) -> tuple[np.ndarray, np.ndarray]:
        """Scene points (..., 3) to layout coordinates (u, w)."""
        d = np.asarray(xz, dtype=np.float64) - np.array([self.center[0], 0.0, self.center[1]])
        return d @ self.along, d @ self.across


def random_scene_spec(stream: Stream) -> SceneSpec:
    g = stream.generator()
    sw = g.uniform(2.8, 4.0)
    rw = g.uniform(6.0, 8.0)
    L = 20.0
    strips = [Strip(CLASS_ID["road"], -rw, 0.0), Strip(CLASS_ID["sidewalk"], 0.0, sw),
              Strip(CLASS_ID["terrain"], sw, sw + 12.0), Strip(CLASS_ID["terrain"], -rw - 3.0, -rw)]
    boxes = []
    u = -L
    while u < L:
        length = g.uniform(8.0, 20.0)
        depth = g.uniform(6.0, 12.0)
        boxes.append(Box(CLASS_ID["building"], u, min(u + length, L), sw, sw + depth, g.uniform(4.0, 12.0)))
        gap = g.uniform(2.0, 6.0)
        gu = min(u + length, L)
        if gu + gap < L:
            boxes.append(Box(CLASS_ID["vegetation"], gu + 0.3, gu + gap - 0.3, sw + 0.5, sw + 2.0, g.uniform(1.0, 2.5)))
        u = gu + gap
    u = -L + g.uniform(0.0, 6.0)
    while u < L:
        boxes.append(Box(CLASS_ID["pole"], u, u + 0.15, 0.225, 0.375, 3.5))
        u += g.uniform(8.0, 15.0)
    u = -L + g.uniform(0.0, 10.0)
    while u < L - 4.5:
        boxes.append(Box(CLASS_ID["car"], u, u + 4.5, -2.3, -0.5, 1.5))
        u += 4.5 + g.uniform(2.0, 20.0)
    return SceneSpec(tuple(strips), tuple(boxes), corridor=(1.0, sw - 0.8),
                     yaw=float(g.uniform(-np.pi, np.pi)),
                     center=(float(g.uniform(-5, 5)), float(g.uniform(-5, 5))), half_length=L)


def _grid(lo: float, hi: float, step: float) -> np.ndarray:
    n = max(int(np.floor((hi - lo) / step)), 0)
    return lo + step * (np.arange(n + 1) if lo + n * step < hi else np.arange(n))


def _box_points(spec: SceneSpec, b: Box) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Side faces up to the point cap and the top when it is below the cap."""
    s = spec.spacing
    top = min(b.height, POINT_CAP)
    ys = _grid(0.0, top, s) + s / 2
    us, ws = _grid(b.u_lo, b.u_hi, s), _grid(b.w_lo, b.w_hi, s)
    parts = []
    for w in (b.w_lo, b.w_hi):
        uu, yy = np.meshgrid(us, ys, indexing="ij")
        parts.append((uu.ravel(), np.full(uu.size, w), yy.ravel()))
    for u in (b.u_lo, b.u_hi):
        ww, yy = np.meshgrid(ws, ys, indexing="ij")
        parts.append((np.full(ww.size, u), ww.ravel(), yy.ravel()))
    if b.height <= POINT_CAP:
        uu, ww = np.meshgrid(us, ws, indexing="ij")
        parts.append((uu.ravel(), ww.ravel(), np.full(uu.size, b.height)))
    u, w, y = (np.concatenate(p) for p in zip(*parts))
    return u, w, y


@dataclass
class Scene:
    spec: SceneSpec
    cloud: SemanticPointCloud

    def voxel_at(self, t1) -> VoxelGrid:
        return build_voxel_grid(self.cloud, t1)

    def ground_height(self, x, z) -> np.ndarray:
        return np.full(np.shape(x), self.spec.ground_height, dtype=np.float64)

    def __iter__(self):
        return iter((self.cloud, self.voxel_at, self.ground_height))


def generate_scene(spec: SceneSpec) -> Scene:
    """Sample the ground strips and obstacle surfaces into a semantic point cloud."""
    s = spec.spacing
    L = spec.half_length
    us = _grid(-L, L, s)
    xyz, cls = [], []
    for strip in spec.strips:
        uu, ww = np.meshgrid(us, _grid(strip.w_lo, strip.w_hi, s), indexing="ij")
        xyz.append(spec.to_scene(uu.ravel(), ww.ravel()))
        cls.append(np.full(uu.size, strip.cls, dtype=np.int64))
    for b in spec.obstacles:
        u, w, y = _box_points(spec, b)
        xyz.append(spec.to_scene(u, w, y + spec.ground_height))
        cls.append(np.full(u.size, b.cls, dtype=np.int64))
    return Scene(spec, SemanticPointCloud(np.concatenate(xyz), np.concatenate(cls)))


@dataclass(frozen=True)
class TrajectorySpec:
    speed: float  # m/s
    beta: np.ndarray  # (10,)
    start: tuple[float, float]  # layout (u, w)
    goal: tuple[float, float]
    waypoint: tuple[float, float] | None = None
    gait_frequency: float = 1.0  # strides per second
    phase: float = 0.0
    n_frames: int = 60

    def __post_init__(self):
        if not self.speed > 0:
            raise ValueError("speed must be positive")
        if np.hypot(self.goal[0] - self.start[0], self.goal[1] - self.start[1]) < 1e-6:
            raise PathError("start and goal coincide")
        if np.shape(self.beta) != (N_BETAS,):
            raise ValueError(f"beta must have {N_BETAS} entries")


def walking_speed(stature: float, noise: float) -> float:
    return float(np.clip(1.25 + 0.3 * stature + noise, 0.5, 2.0))


def stride_frequency(speed: float, leg_length: float) -> float:
    """Strides (two steps) per second for a step length growing with leg length and speed."""
    step = 0.75 * leg_length * (speed / 1.25) ** 0.4
    return speed / (2.0 * step)


def _leg_length(beta) -> float:
    off = skeleton_from_shape(beta).offsets
    return float(-(off[1, 1] + off[4, 1] + off[7, 1]))


def sample_trajectory_spec(scene: Scene, stream: Stream, n_frames: int = 60,
                           random_phase: bool = False) -> TrajectorySpec:
    """Random walk on the sidewalk corridor.

    The path is straight unless an obstacle blocks it, in which case it
    detours through one waypoint. Clips start at the same gait phase (a left-leg swing peak) unless
    ``random_phase`` is set.
    """
    g = stream.generator()
    spec = scene.spec
    beta = np.zeros(N_BETAS)
    beta[0] = np.clip(g.normal(), -2.0, 2.0)
    beta[1:] = np.clip(g.normal(0.0, 0.5, N_BETAS - 1), -1.5, 1.5)
    speed = walking_speed(beta[0], g.normal(0.0, 0.1))
    length = speed * n_frames / FPS
    lo, hi = spec.corridor
    sign = 1.0 if g.uniform() < ROAD_ON_RIGHT else -1.0
    u0 = g.uniform(-spec.half_length + 6.0, spec.half_length - 6.0)
    w0, w1 = g.uniform(lo, hi), g.uniform(lo, hi)
    du = np.sqrt(max(length ** 2 - (w1 - w0) ** 2, 0.25 * length ** 2))
    waypoint = None
    start, goal = np.array([u0, w0]), np.array([u0 + sign * du, w1])
    if any(_segment_box_distance(start, goal, b) < CLEARANCE for b in spec.obstacles):
        # detour through the corridor point farthest from the blocking obstacles
        waypoint = (u0 + sign * du * g.uniform(0.35, 0.65), lo if w0 + w1 > lo + hi else hi)
    freq = stride_frequency(speed, _leg_length(beta))
    phase = float(g.uniform(0, 2 * np.pi)) if random_phase else 0.0
    return TrajectorySpec(speed, beta, tuple(start), tuple(goal), waypoint, freq, phase, n_frames)


def _segment_box_distance(p: np.ndarray, q: np.ndarray, b: Box) -> float:
    """Smallest distance between segment pq (layout coordinates) and a box footprint."""
    ts = np.linspace(0.0, 1.0, 64)
    pts = p + ts[:, None] * (q - p)
    du = np.maximum(np.maximum(b.u_lo - pts[:, 0], pts[:, 0] - b.u_hi), 0.0)
    dw = np.maximum(np.maximum(b.w_lo - pts[:, 1], pts[:, 1] - b.w_hi), 0.0)
    return float(np.hypot(du, dw).min())


def _on_walkable(spec: SceneSpec, uw) -> bool:
    return any(s.cls in WALKABLE and s.w_lo <= uw[1] < s.w_hi for s in spec.strips)


def _resample_path(points: np.ndarray, n: int) -> np.ndarray:
    """``n`` equally spaced positions along a polyline, first and last exact."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cum = np.concatenate(([0.0], np.cumsum(seg)))
    s = np.linspace(0.0, cum[-1], n)
    out = np.stack([np.interp(s, cum, points[:, i]) for i in range(points.shape[1])], axis=1)
    out[0], out[-1] = points[0], points[-1]
    return out


def _flex(angle) -> np.ndarray:
    """Forward swing (about +x) by ``angle`` radians, batched."""
    a = np.zeros(np.shape(angle) + (3,))
    a[..., 0] = -np.asarray(angle)
    return matrix_from_axis_angle(a)


def _axis_rot(axis: int, angle) -> np.ndarray:
    a = np.zeros(np.shape(angle) + (3,))
    a[..., axis] = angle
    return matrix_from_axis_angle(a)


def gait_pose(n_frames: int, frequency: float, phase: float, amplitude: float = 1.0) -> np.ndarray:
    """(T, 23, 3, 3) local body rotations of a walking cycle."""
    t = np.arange(n_frames) / FPS
    p = 2 * np.pi * frequency * t + phase
    pose = np.tile(np.eye(3), (n_frames, N_BODY_JOINTS, 1, 1))
    a_hip, a_knee, a_arm = 0.38 * amplitude, 0.75 * amplitude, 0.35 * amplitude

    def body(j, R):
        pose[:, j - 1] = R

    for side, shift in ((0, 0.0), (1, np.pi)):
        hip = a_hip * np.sin(p + shift)
        knee = 0.08 + a_knee * np.maximum(0.0, np.cos(p + shift)) ** 1.5
        body(1 + side, _flex(hip))
        body(4 + side, _flex(-knee))
        body(7 + side, _flex(knee - hip))
        lower = -np.deg2rad(70.0) if side == 0 else np.deg2rad(70.0)
        swing = a_arm * np.sin(p + shift + np.pi)
        body(16 + side, _flex(swing) @ _axis_rot(2, np.full(n_frames, lower)))
        bend = 0.25 + 0.15 * np.maximum(0.0, np.sin(p + shift + np.pi))
        body(18 + side, _axis_rot(1, -bend if side == 0 else bend))
    body(3, _axis_rot(1, 0.08 * amplitude * np.sin(p)))
    body(6, _axis_rot(1, -0.05 * amplitude * np.sin(p)))
    return pose


def _smooth_headings(d: np.ndarray, window: int = 9) -> np.ndarray:
    kernel = np.ones(window) / window
    pad = window // 2
    padded = np.concatenate((np.repeat(d[:1], pad, 0), d, np.repeat(d[-1:], pad, 0)))
    out = np.stack([np.convolve(padded[:, i], kernel, mode="valid") for i in range(2)], axis=1)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def generate_trajectory(scene: Scene, tspec: TrajectorySpec, record_id: str = "0") -> LabelRecord:
    """Walk from ``tspec.start`` to ``tspec.goal`` (through the waypoint, if any).

    Frames are spaced evenly along the path, so the last frame sits exactly
    at the goal. The root height keeps the lower foot on the ground.

    Raises:
        PathError: start or goal off the walkway, or the path passes within
            the clearance of an obstacle.
    """
    spec = scene.spec
    pts = [tspec.start] + ([tspec.waypoint] if tspec.waypoint is not None else []) + [tspec.goal]
    pts = np.asarray(pts, dtype=np.float64)
    if not (_on_walkable(spec, pts[0]) and _on_walkable(spec, pts[-1])):
        raise PathError("start and goal must lie on a walkable strip")
    for a, b in zip(pts[:-1], pts[1:]):
        if any(_segment_box_distance(a, b, box) < CLEARANCE for box in spec.obstacles):
            raise PathError("no collision-free path")
    T = tspec.n_frames
    uw = _resample_path(pts, T)
    xz = spec.to_scene(uw[:, 0], uw[:, 1])
    heading_uw = _smooth_headings(np.gradient(uw, axis=0))
    dirs = heading_uw[:, :1] * spec.along + heading_uw[:, 1:] * spec.across
    yaw = np.arctan2(dirs[:, 0], dirs[:, 2])
    root = yaw_matrix(yaw)
    pose = gait_pose(T, tspec.gait_frequency, tspec.phase, amplitude=min(1.3, tspec.speed / 1.25))
    skel = skeleton_from_shape(tspec.beta)
    joints = forward_kinematics(pose, root, np.zeros((T, 3)), skel)
    lowest = joints[:, list(FOOT_JOINTS), 1].min(1)
    trans = xz.copy()
    trans[:, 1] = spec.ground_height - lowest
    motion = Motion(trans, root, pose, np.ones(T, dtype=bool))
    ctx = GenerationContext(scene.voxel_at(trans[0]), np.asarray(tspec.beta, dtype=np.float64),
                            trans[0].copy(), trans[-1].copy())
    return LabelRecord(record_id, motion, ctx, ground_height=spec.ground_height)


@dataclass
class SyntheticDataset:
    scenes: list[Scene]
    records: list[LabelRecord]
    scene_of: dict[str, int] = field(default_factory=dict)


def generate_dataset(n_scenes: int, n_records: int, stream: Stream, n_frames: int = 60,
                     max_tries: int = 20) -> SyntheticDataset:
    """Records are spread round-robin over the scenes; ids are zero-padded indices."""
    if n_scenes < 1 or n_records < 1:
        raise ValueError("need at least one scene and one record")
    scenes = [generate_scene(random_scene_spec(stream.split("scene", i))) for i in range(n_scenes)]
    records, scene_of = [], {}
    width = len(str(n_records - 1))
    for i in range(n_records):
        s = i % n_scenes
        rid = f"{i:0{width}d}"
        for attempt in range(max_tries):
            tspec = sample_trajectory_spec(scenes[s], stream.split("record", i, attempt), n_frames)
            try:
                records.append(generate_trajectory(scenes[s], tspec, rid))
                break
            except PathError:
                continue
        else:
            raise PathError(f"record {rid}: no valid trajectory after {max_tries} tries")
        scene_of[rid] = s
    return SyntheticDataset(scenes, records, scene_of)


def inject_anomalies(records: Sequence[LabelRecord], fraction: float, mode: str,
                     stream: Stream) -> tuple[list[LabelRecord], set[str]]:
    """Corrupt ``round(fraction * N)`` records.

    Modes: ``scramble-pose`` replaces every body rotation with a uniformly
    random one; ``teleport-root`` shifts the root by 1-3 m from a random
    frame on; ``freeze`` holds the first frame's pose and position.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    if mode not in ANOMALY_MODES:
        raise ValueError(f"unknown anomaly mode {mode!r}")
    g = stream.generator()
    n = int(round(fraction * len(records)))
    chosen = set(g.permutation(len(records))[:n].tolist())
    out, ids = [], set()
    for i, rec in enumerate(records):
        if i not in chosen:
            out.append(rec)
            continue
        m = rec.motion
        rg = stream.split("record", rec.id).generator()
        T = m.n_frames
        if mode == "scramble-pose":
            pose = random_rotations(T * N_BODY_JOINTS, rg).reshape(T, N_BODY_JOINTS, 3, 3)
            m2 = Motion(m.trans.copy(), m.root_orient.copy(), pose, m.mask.copy())
        elif mode == "teleport-root":
            t0 = int(rg.integers(1, T))
            ang = rg.uniform(0, 2 * np.pi)
            jump = rg.uniform(1.0, 3.0) * np.array([np.cos(ang), 0.0, np.sin(ang)])
            trans = m.trans.copy()
            trans[t0:] += jump
            m2 = Motion(trans, m.root_orient.copy(), m.body_pose.copy(), m.mask.copy())
        else:
            m2 = Motion(np.repeat(m.trans[:1], T, 0), np.repeat(m.root_orient[:1], T, 0),
                        np.repeat(m.body_pose[:1], T, 0), m.mask.copy())
        out.append(dataclasses.replace(rec, motion=m2))
        ids.add(rec.id)
    return out, ids
