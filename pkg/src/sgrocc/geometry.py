"""Pinhole camera model, rigid poses, rays and voxel-grid indexing.

Camera convention: right-handed, +z forward, +x right, +y down.  Pixel
centers sit at integer coordinates, so pixel ``(row, col)`` is the point
``(u=col, v=row)``.  Poses map world points into the camera frame
(``X_cam = R @ X_world + t``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateRay, InvalidSpec, NonPositiveDepth

Z_EPS = 1e-6
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidSpec(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidSpec(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-from-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InvalidSpec("rotation must be orthonormal with det(R) = 1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, ``-R^T t``."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> Pose:
        R = self.rotation.T
        return Pose(R, -R @ self.translation)

    def compose(self, other: Pose) -> Pose:
        """Return ``self o other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose of a camera at ``eye`` looking toward ``target`` with world ``up``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise DegenerateRay("look_at target coincides with eye")
    forward /= n
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        # looking straight along ``up``: use the world axis least aligned with the view
        right = np.cross(forward, np.eye(3)[np.argmin(np.abs(forward))])
        rn = np.linalg.norm(right)
    right /= rn
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    # re-orthonormalize against rounding so the Pose check always passes
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return Pose(R, -R @ eye)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True, eq=False)
class VoxelGridSpec:
    origin: tuple = (0.0, 0.0, 0.0)
    dims: tuple = (60, 60, 36)
    resolution: float = 0.08

    def __post_init__(self):
        origin = tuple(float(x) for x in self.origin)
        dims = tuple(int(d) for d in self.dims)
        if len(origin) != 3 or len(dims) != 3:
            raise InvalidSpec("voxel grid origin and dims must have three entries")
        if not self.resolution > 0:
            raise InvalidSpec(f"resolution must be positive, got {self.resolution}")
        if min(dims) < 1:
            raise InvalidSpec(f"all dims must be >= 1, got {dims}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "resolution", float(self.resolution))

    def __eq__(self, other):
        if not isinstance(other, VoxelGridSpec):
            return NotImplemented
        return (self.origin, self.dims, self.resolution) == (other.origin, other.dims, other.resolution)

    def __hash__(self):
        return hash((self.origin, self.dims, self.resolution))

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.origin)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.origin) + np.array(self.dims) * self.resolution

    def centers(self) -> np.ndarray:
        """Voxel centers as an ``(nx, ny, nz, 3)`` array."""
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.resolution for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def translated(self, offset) -> VoxelGridSpec:
        return VoxelGridSpec(tuple(np.add(self.origin, offset)), self.dims, self.resolution)


def project_point(K: CameraIntrinsics, pose: Pose, P) -> tuple[float, float, float]:
    """Project a world point to ``(u, v, depth)``; depth is camera-frame z.

    The pixel may fall outside the image; callers check bounds.
    """
    x, y, z = pose.apply(np.asarray(P, dtype=np.float64))
    if z <= Z_EPS:
        raise BehindCamera(f"point has camera depth {z:.3g} <= {Z_EPS}")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, float(z)


def project_points(K: CameraIntrinsics, pose: Pose, points: np.ndarray):
    """Vectorized projection.  Returns ``(u, v, z)``; entries with
    ``z <= Z_EPS`` carry NaN pixel coordinates."""
    pc = pose.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    front = z > Z_EPS
    safe = np.where(front, z, 1.0)
    u = np.where(front, K.fx * pc[:, 0] / safe + K.cx, np.nan)
    v = np.where(front, K.fy * pc[:, 1] / safe + K.cy, np.nan)
    return u, v, z


def backproject(K: CameraIntrinsics, pose: Pose, u: float, v: float, d: float) -> np.ndarray:
    """World point at pixel ``(u, v)`` with camera-frame depth ``d``."""
    if not d > 0:
        raise NonPositiveDepth(f"depth must be positive, got {d}")
    pc = np.array([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d])
    return pose.rotation.T @ (pc - pose.translation)


def backproject_pixels(K: CameraIntrinsics, pose: Pose, u, v, d) -> np.ndarray:
    u, v, d = (np.asarray(a, dtype=np.float64) for a in (u, v, d))
    pc = np.stack([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d], axis=-1)
    return (pc - pose.translation) @ pose.rotation


def pixel_rays(K: CameraIntrinsics, pose: Pose, u, v) -> np.ndarray:
    """Unit world-frame directions through pixel coordinates."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    dc = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    dw = dc @ pose.rotation
    return dw / np.linalg.norm(dw, axis=-1, keepdims=True)


def ray_through(O_cam, P) -> Ray:
    O = np.asarray(O_cam, dtype=np.float64)
    diff = np.asarray(P, dtype=np.float64) - O
    n = math.sqrt(float(diff @ diff))
    if n <= 1e-9:
        raise DegenerateRay("point coincides with camera center")
    return Ray(O.copy(), diff / n)


def world_to_voxel(spec: VoxelGridSpec, P) -> tuple[int, int, int] | None:
    """Index of the half-open voxel containing ``P``, or None outside the grid."""
    rel = (np.asarray(P, dtype=np.float64) - spec.lo) / spec.resolution
    idx = np.floor(rel).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= np.array(spec.dims)):
        return None
    return int(idx[0]), int(idx[1]), int(idx[2])


def world_to_voxels(spec: VoxelGridSpec, points: np.ndarray):
    """Vectorized ``world_to_voxel``: returns ``(idx (N,3), inside (N,))``."""
    rel = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - spec.lo) / spec.resolution
    idx = np.floor(rel).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array(spec.dims)), axis=1)
    return idx, inside


def in_image(K: CameraIntrinsics, u, v):
    """True where a continuous pixel coordinate can be bilinearly sampled."""
    u = np.asarray(u)
    v = np.asarray(v)
    with np.errstate(invalid="ignore"):
        return (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0:
        R[:, 0] *= -1
    return R


def intrinsics_from_fov(width: int, height: int, hfov_deg: float) -> CameraIntrinsics:
    f = 0.5 * width / math.tan(math.radians(hfov_deg) / 2)
    return CameraIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


__all__ = [
    "CameraIntrinsics",
    "Pose",
    "Ray",
    "VoxelGridSpec",
    "Z_EPS",
    "backproject",
    "backproject_pixels",
    "in_image",
    "intrinsics_from_fov",
    "look_at",
    "pixel_rays",
    "project_point",
    "project_points",
    "random_rotation",
    "ray_through",
    "world_to_voxel",
    "world_to_voxels",
]
