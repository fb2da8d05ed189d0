"""Scene context: depth unprojection, local cropping and semantic voxelization.

Coordinates: the camera frame of a depth map is x right, y down, z forward.
:func:`scene_from_camera` turns it into the scene frame used everywhere else
(+y up) by a 180 degree rotation about the optical axis. The voxel grid is
indexed ``[x, y, z]`` with y vertical and uses half-open cells
``[low, high)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DepthError, ShapeError
from .motion import Motion
from .rotations import yaw_matrix

# CityScapes train ids
PALETTE = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
)
CLASS_ID = {name: i for i, name in enumerate(PALETTE)}
N_CLASSES = len(PALETTE)
WALKABLE = (CLASS_ID["road"], CLASS_ID["sidewalk"], CLASS_ID["terrain"])
# reserved for points of the pedestrian being generated; never voxelized
EGO_CLASS = 254
EMPTY = 255

GRID_DIMS = (40, 40, 40)
CELL_SIZE = (0.2, 0.1, 0.2)
LOCAL_EXTENT = (4.0, 2.0, 4.0)  # half-widths around the start position

VOXEL_MAGIC = b"PGVX"


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray  # (H, W) meters; NaN or <= 0 marks a missing pixel

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class SemanticMap:
    classes: np.ndarray  # (H, W) integer class ids


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    cx: float
    cy: float

    def project(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (N, 3) to pixel coordinates (N, 2)."""
        z = points[:, 2]
        return np.stack((points[:, 0] * self.focal / z + self.cx,
                         points[:, 1] * self.focal / z + self.cy), axis=1)


@dataclass(frozen=True)
class SemanticPointCloud:
    xyz: np.ndarray  # (N, 3)
    cls: np.ndarray  # (N,) class ids

    def __post_init__(self):
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3 or self.cls.shape != (self.xyz.shape[0],):
            raise ShapeError("points must be (N, 3) with one class per point")

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @classmethod
    def empty(cls) -> SemanticPointCloud:
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    def select(self, keep: np.ndarray) -> SemanticPointCloud:
        return SemanticPointCloud(self.xyz[keep], self.cls[keep])

    @staticmethod
    def concat(clouds) -> SemanticPointCloud:
        clouds = list(clouds)
        if not clouds:
            return SemanticPointCloud.empty()
        return SemanticPointCloud(np.concatenate([c.xyz for c in clouds]),
                                  np.concatenate([c.cls for c in clouds]))


@dataclass(frozen=True)
class VoxelGrid:
    classes: np.ndarray  # (X, Y, Z) uint8, EMPTY where no points
    origin: np.ndarray  # (3,) corner of cell [0, 0, 0]
    cell_size: tuple[float, float, float] = CELL_SIZE

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.classes.shape)

    def cell_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cell indices of ``points`` (N, 3) and a flag for points inside the grid."""
        return cell_indices(points, self.origin, self.cell_size, self.dims)

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Class of the cell containing each point, EMPTY outside the grid."""
        idx, inside = self.cell_index(points)
        out = np.full(len(points), EMPTY, dtype=np.uint8)
        i = idx[inside]
        out[inside] = self.classes[i[:, 0], i[:, 1], i[:, 2]]
        return out


def grid_origin(t1, dims=GRID_DIMS, cell_size=CELL_SIZE) -> np.ndarray:
    """Origin that places ``t1`` at the grid center."""
    half = np.asarray(dims, dtype=np.float64) * np.asarray(cell_size) / 2
    return np.asarray(t1, dtype=np.float64) - half


def cell_indices(points, origin, cell_size, dims) -> tuple[np.ndarray, np.ndarray]:
    """Half-open cell assignment that agrees exactly with ``origin + i * size <= p``."""
    points = np.asarray(points, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    size = np.asarray(cell_size, dtype=np.float64)
    idx = np.floor((points - origin) / size).astype(np.int64)
    # the division can round across a boundary; fix against the explicit bounds
    low = origin + idx * size
    idx -= points < low
    high = origin + (idx + 1) * size
    idx += points >= high
    inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    return idx, inside


def estimate_intrinsics(width: int, height: int) -> Intrinsics:
    """Focal length = image diagonal in pixels, principal point at the center."""
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be positive")
    return Intrinsics(float(np.hypot(width, height)), width / 2.0, height / 2.0)


def depth_alignment_factor(root_depth: float, label_depth_at_root: float) -> float:
    """Scale that makes the depth label agree with the SMPL root depth."""
    if not root_depth > 0:
        raise DepthError("root depth must be positive")
    if not label_depth_at_root > 0:
        raise DepthError("degenerate depth label at the root pixel")
    return root_depth / label_depth_at_root


def unproject_depth(depth: DepthMap, semantics: SemanticMap, K: Intrinsics,
                    gamma: float = 1.0) -> SemanticPointCloud:
    """Lift every valid pixel to a camera-frame point carrying its class.

    Pixel ``(u, v)`` with depth ``z`` becomes
    ``((u - cx) * g * z / f, (v - cy) * g * z / f, g * z)`` with ``g = gamma``.
    Pixels are addressed by their integer index. Missing depths are skipped.
    """
    if not gamma > 0:
        raise DepthError("gamma must be positive")
    if semantics.classes.shape != depth.depth.shape:
        raise ShapeError("depth and semantic maps must have the same size")
    d = np.asarray(depth.depth, dtype=np.float64)
    v, u = np.nonzero(np.isfinite(d) & (d > 0))
    z = gamma * d[v, u]
    xyz = np.stack(((u - K.cx) * z / K.focal, (v - K.cy) * z / K.focal, z), axis=1)
    return SemanticPointCloud(xyz, semantics.classes[v, u].astype(np.int64))


def scene_from_camera(pc: SemanticPointCloud) -> SemanticPointCloud:
    """Camera frame (y down) to scene frame (y up): rotate 180 degrees about z."""
    xyz = pc.xyz * np.array([-1.0, -1.0, 1.0])
    return SemanticPointCloud(xyz, pc.cls)


def crop_local(pc: SemanticPointCloud, t1, extent=LOCAL_EXTENT) -> SemanticPointCloud:
    """Points strictly within ``extent`` of ``t1`` along every axis."""
    d = np.abs(pc.xyz - np.asarray(t1, dtype=np.float64))
    return pc.select(np.all(d < np.asarray(extent), axis=1))


def drop_ego(pc: SemanticPointCloud) -> SemanticPointCloud:
    return pc.select(pc.cls != EGO_CLASS)


def voxelize(pc_local: SemanticPointCloud, t1, dims=GRID_DIMS, cell_size=CELL_SIZE) -> VoxelGrid:
    """Majority-vote semantic voxel grid centered at ``t1``.

    Each cell takes the most frequent class among its points; ties go to the
    smallest class id. Points outside the grid are ignored.
    """
    origin = grid_origin(t1, dims, cell_size)
    classes = np.full(dims, EMPTY, dtype=np.uint8)
    idx, inside = cell_indices(pc_local.xyz, origin, cell_size, dims)
    idx, cls = idx[inside], pc_local.cls[inside].astype(np.int64)
    if len(cls):
        n_cls = int(cls.max()) + 1
        flat = np.ravel_multi_index(idx.T, dims)
        counts = np.zeros((int(np.prod(dims)), n_cls), dtype=np.int64)
        np.add.at(counts, (flat, cls), 1)
        occupied = np.nonzero(counts.sum(1))[0]
        # argmax returns the first maximum, i.e. the smallest class id
        classes.reshape(-1)[occupied] = counts[occupied].argmax(1)
    return VoxelGrid(classes, origin, tuple(cell_size))


def build_voxel_grid(pc: SemanticPointCloud, t1) -> VoxelGrid:
    """Crop around ``t1``, discard ego-pedestrian points and voxelize."""
    return voxelize(drop_ego(crop_local(pc, t1)), t1)


def rotate_augment(m: Motion, pc: SemanticPointCloud, angle: float) -> tuple[Motion, SemanticPointCloud]:
    """Rotate a motion and its scene about the vertical axis through the first frame."""
    R = yaw_matrix(angle)
    center = m.trans[0]
    # written as an increment so a zero angle returns the inputs bit for bit
    step = (R - np.eye(3)).T
    trans = m.trans + (m.trans - center) @ step
    root = R @ m.root_orient
    xyz = pc.xyz + (pc.xyz - center) @ step
    return (Motion(trans, root, m.body_pose.copy(), m.mask.copy()), SemanticPointCloud(xyz, pc.cls.copy()))


def rotate_grid(grid: VoxelGrid, angle: float) -> VoxelGrid:
    """Rotate a centered grid about its vertical center line (nearest-cell resampling).

    Cell ``c`` of the result takes the class found at ``R^-1 c`` in the input,
    so motions rotated by the same angle about the grid center stay consistent.
    """
    X, _, Z = grid.dims
    sx, _, sz = grid.cell_size
    cx = (np.arange(X) + 0.5) * sx - X * sx / 2
    cz = (np.arange(Z) + 0.5) * sz - Z * sz / 2
    gx, gz = np.meshgrid(cx, cz, indexing="ij")
    c, s = np.cos(angle), np.sin(angle)
    # inverse yaw: x' = c x - s z, z' = s x + c z
    src_x = c * gx - s * gz
    src_z = s * gx + c * gz
    ix = np.floor((src_x + X * sx / 2) / sx).astype(np.int64)
    iz = np.floor((src_z + Z * sz / 2) / sz).astype(np.int64)
    ok = (ix >= 0) & (ix < X) & (iz >= 0) & (iz < Z)
    out = np.full_like(grid.classes, EMPTY)
    # (X, Z, Y) view so the column mask addresses the two horizontal axes
    out.transpose(0, 2, 1)[ok] = grid.classes[ix[ok], :, iz[ok]]
    return VoxelGrid(out, grid.origin.copy(), grid.cell_size)


def write_voxel(path, grid: VoxelGrid) -> None:
    """Little-endian: magic, 3 x u32 dims, 3 x f32 cell size, 3 x f32 origin, then u8 classes."""
    header = VOXEL_MAGIC + struct.pack("<3I3f3f", *grid.dims, *grid.cell_size, *grid.origin)
    Path(path).write_bytes(header + np.ascontiguousarray(grid.classes, dtype=np.uint8).tobytes())


def read_voxel(path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != VOXEL_MAGIC:
        raise ValueError(f"{path}: not a voxel file")
    fields = struct.unpack_from("<3I3f3f", raw, 4)
    dims, cell, origin = fields[:3], fields[3:6], fields[6:9]
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + struct.calcsize("<3I3f3f"))
    if body.size != int(np.prod(dims)):
        raise ValueError(f"{path}: truncated voxel payload")
    return VoxelGrid(body.reshape(dims).copy(), np.asarray(origin, dtype=np.float64),
                     tuple(float(c) for c in cell))
