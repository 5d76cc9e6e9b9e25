"""Procedural indoor scenes with analytic depth, normal, label and occupancy oracles.

Every solid is an axis-aligned box.  Structural slabs (floor, ceiling,
walls) straddle the room boundary planes, furniture boxes stand on the
floor and thin panels hang on walls.  With the default ``snap`` settings
every face lies on a voxel-center plane of the matching evaluation grid,
so surface voxels are unambiguous.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CameraOutsideScene,
    FracOutOfRange,
    GridOutsideScene,
    InvalidSpec,
    PathLeavesBounds,
)
from .geometry import CameraIntrinsics, Pose, VoxelGridSpec, look_at, pixel_rays

N_CLASSES = 12
MAX_STEP = 0.3


class SemanticClass(enum.IntEnum):
    EMPTY = 0
    CEILING = 1
    FLOOR = 2
    WALL = 3
    WINDOW = 4
    CHAIR = 5
    BED = 6
    SOFA = 7
    TABLE = 8
    TVS = 9
    FURNITURE = 10
    OBJECTS = 11


STRUCTURAL = (SemanticClass.CEILING, SemanticClass.FLOOR, SemanticClass.WALL, SemanticClass.WINDOW)
BOX_CLASSES = (
    SemanticClass.CHAIR,
    SemanticClass.BED,
    SemanticClass.SOFA,
    SemanticClass.TABLE,
    SemanticClass.FURNITURE,
    SemanticClass.OBJECTS,
)
PANEL_CLASSES = (SemanticClass.WINDOW, SemanticClass.TVS)

# footprint (x, y) and height ranges in meters, before snapping
_BOX_SIZES = {
    SemanticClass.CHAIR: ((0.40, 0.56), (0.40, 0.56), (0.72, 0.96)),
    SemanticClass.BED: ((1.20, 1.60), (0.80, 1.04), (0.40, 0.56)),
    SemanticClass.SOFA: ((1.04, 1.44), (0.56, 0.72), (0.64, 0.80)),
    SemanticClass.TABLE: ((0.64, 0.96), (0.56, 0.80), (0.64, 0.80)),
    SemanticClass.FURNITURE: ((0.56, 0.96), (0.32, 0.48), (1.04, 1.60)),
    SemanticClass.OBJECTS: ((0.24, 0.40), (0.24, 0.40), (0.24, 0.48)),
}
_PANEL_SIZES = {
    SemanticClass.WINDOW: ((0.80, 1.20), (0.80, 1.04), 1.20),  # width, height, center height
    SemanticClass.TVS: ((0.64, 0.96), (0.40, 0.56), 1.28),
}


@dataclass(frozen=True)
class Solid:
    kind: str  # "slab" | "box" | "panel"
    label: int
    lo: tuple
    hi: tuple

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= np.array(self.lo)) & (p <= np.array(self.hi)), axis=-1)

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from points to the box surface."""
        p = np.asarray(points, dtype=np.float64)
        lo, hi = np.array(self.lo), np.array(self.hi)
        outside = np.maximum(np.maximum(lo - p, p - hi), 0.0)
        d_out = np.linalg.norm(outside, axis=-1)
        d_in = np.min(np.minimum(p - lo, hi - p), axis=-1)
        return np.where(np.any(outside > 0, axis=-1), d_out, np.abs(d_in))


@dataclass(frozen=True)
class RoomSpec:
    size: tuple = (4.8, 4.8, 2.88)
    origin: tuple = (0.0, 0.0, 0.0)
    thickness: float = 0.08
    n_objects: int = 0
    snap: float = 0.08
    snap_offset: float = 0.04
    clear_radius: float = 1.4

    def __post_init__(self):
        if len(self.size) != 3 or min(self.size) < 1.0:
            raise InvalidSpec(f"room extent must be >= 1 m per axis, got {self.size}")
        if self.thickness <= 0 or self.n_objects < 0 or self.snap <= 0:
            raise InvalidSpec("thickness and snap must be positive and n_objects >= 0")


@dataclass(frozen=True)
class SceneModel:
    solids: tuple
    bounds: tuple  # (lo, hi)
    seed: int = 0
    room: RoomSpec = field(default_factory=RoomSpec)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.bounds[0])

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.bounds[1])

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.solids], dtype=np.int64)

    def boxes(self):
        lo = np.array([s.lo for s in self.solids], dtype=np.float64).reshape(-1, 3)
        hi = np.array([s.hi for s in self.solids], dtype=np.float64).reshape(-1, 3)
        return lo, hi

    def inside_solid(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.zeros(len(p), dtype=bool)
        for s in self.solids:
            out |= s.contains(p)
        return out

    def distance_to_surface(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.min(np.stack([s.distance(p) for s in self.solids]), axis=0)

    def to_bytes(self) -> bytes:
        parts = [np.array([len(self.solids)], dtype="<u4").tobytes()]
        for s in self.solids:
            parts.append(s.kind.encode().ljust(8, b"\0"))
            parts.append(np.array([s.label], dtype="<u4").tobytes())
            parts.append(np.array(s.lo + s.hi, dtype="<f8").tobytes())
        parts.append(np.array(self.bounds[0] + self.bounds[1], dtype="<f8").tobytes())
        return b"".join(parts)


@dataclass(frozen=True, eq=False)
class DepthFrame:
    depth: np.ndarray  # (H, W) meters, +inf where no hit
    normals: np.ndarray  # (H, W, 3)
    semantics: np.ndarray  # (H, W) class codes

    @property
    def shape(self) -> tuple:
        return self.depth.shape


def _snap(x: float, snap: float, offset: float) -> float:
    return round((x - offset) / snap) * snap + offset


def build_scene(seed: int, spec: RoomSpec | None = None) -> SceneModel:
    """Deterministic room: 6 structural slabs plus ``spec.n_objects`` objects."""
    spec = spec or RoomSpec()
    rng = np.random.default_rng(seed)
    o = np.array(spec.origin, dtype=np.float64)
    L = np.array(spec.size, dtype=np.float64)
    h = spec.thickness / 2
    lo_b = o - h
    hi_b = o + L + h

    def slab(label, axis, at):
        lo, hi = lo_b.copy(), hi_b.copy()
        lo[axis], hi[axis] = at - h, at + h
        return Solid("slab", int(label), tuple(lo), tuple(hi))

    solids = [
        slab(SemanticClass.FLOOR, 2, o[2]),
        slab(SemanticClass.CEILING, 2, o[2] + L[2]),
        slab(SemanticClass.WALL, 0, o[0]),
        slab(SemanticClass.WALL, 0, o[0] + L[0]),
        slab(SemanticClass.WALL, 1, o[1]),
        slab(SemanticClass.WALL, 1, o[1] + L[1]),
    ]
    inner_lo = o + h
    inner_hi = o + L - h
    center = o + L / 2
    snap = lambda x: _snap(x, spec.snap, spec.snap_offset)  # noqa: E731

    placed: list[Solid] = []
    n_box = n_panel = 0
    for i in range(spec.n_objects):
        if i % 3 == 2:
            label = PANEL_CLASSES[n_panel % len(PANEL_CLASSES)]
            n_panel += 1
            solid = _place_panel(rng, label, inner_lo, inner_hi, spec, snap, placed)
        else:
            label = BOX_CLASSES[n_box % len(BOX_CLASSES)]
            n_box += 1
            solid = _place_box(rng, label, inner_lo, inner_hi, center, spec, snap, placed)
        placed.append(solid)
    solids.extend(placed)
    return SceneModel(tuple(solids), (tuple(lo_b), tuple(hi_b)), seed, spec)


def _overlaps(a_lo, a_hi, others, margin=0.0) -> bool:
    for s in others:
        if np.all(np.array(a_lo) < np.array(s.hi) + margin) and np.all(np.array(a_hi) > np.array(s.lo) - margin):
            return True
    return False


def _place_box(rng, label, inner_lo, inner_hi, center, spec, snap, placed) -> Solid:
    (sx0, sx1), (sy0, sy1), (sz0, sz1) = _BOX_SIZES[label]
    for _ in range(500):
        sx, sy, sz = rng.uniform(sx0, sx1), rng.uniform(sy0, sy1), rng.uniform(sz0, sz1)
        if rng.random() < 0.5:
            sx, sy = sy, sx
        x0 = rng.uniform(inner_lo[0] + spec.snap, inner_hi[0] - sx - spec.snap)
        y0 = rng.uniform(inner_lo[1] + spec.snap, inner_hi[1] - sy - spec.snap)
        lo = np.array([snap(x0), snap(y0), inner_lo[2]])
        hi = np.array([snap(x0 + sx), snap(y0 + sy), snap(inner_lo[2] + sz)])
        if np.any(hi - lo < spec.snap):
            continue
        # keep the central region free for the camera path
        nearest = np.clip(center[:2], lo[:2], hi[:2])
        if np.linalg.norm(nearest - center[:2]) < spec.clear_radius:
            continue
        if _overlaps(lo, hi, placed, margin=spec.snap):
            continue
        return Solid("box", int(label), tuple(lo), tuple(hi))
    raise InvalidSpec(f"could not place object of class {label.name}; room too small or crowded")


def _place_panel(rng, label, inner_lo, inner_hi, spec, snap, placed) -> Solid:
    (w0, w1), (h0, h1), zc = _PANEL_SIZES[label]
    t = spec.snap
    for _ in range(500):
        w, hgt = rng.uniform(w0, w1), rng.uniform(h0, h1)
        wall = int(rng.integers(4))
        axis = wall // 2  # 0: walls normal to x, 1: walls normal to y
        other = 1 - axis
        s0 = rng.uniform(inner_lo[other] + 0.3, inner_hi[other] - w - 0.3)
        lo = np.zeros(3)
        hi = np.zeros(3)
        lo[other], hi[other] = snap(s0), snap(s0 + w)
        lo[2], hi[2] = snap(zc - hgt / 2), snap(zc + hgt / 2)
        if wall % 2 == 0:
            lo[axis], hi[axis] = inner_lo[axis], inner_lo[axis] + t
        else:
            lo[axis], hi[axis] = inner_hi[axis] - t, inner_hi[axis]
        if np.any(hi - lo < t - 1e-9):
            continue
        if _overlaps(lo, hi, placed, margin=spec.snap):
            continue
        return Solid("panel", int(label), tuple(lo), tuple(hi))
    raise InvalidSpec(f"could not place panel of class {label.name}")


def _check_inside(scene: SceneModel, point, exc=CameraOutsideScene):
    p = np.asarray(point, dtype=np.float64)
    if np.any(p < scene.lo) or np.any(p > scene.hi):
        raise exc(f"point {p.round(3).tolist()} outside scene bounds")


def cast_rays(scene: SceneModel, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit along each ray.

    Returns ``(t, solid_index, normal)``; ``t`` is +inf and the index -1 where
    nothing is hit.  Rays starting inside a solid report no hit on it.
    """
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    o = np.asarray(origin, dtype=np.float64).reshape(-1, 3)
    lo, hi = scene.boxes()
    n = len(d)
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    best_axis = np.zeros(n, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        for i in range(len(lo)):
            t1 = (lo[i] - o) * inv
            t2 = (hi[i] - o) * inv
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            parallel = d == 0
            inside_axis = (o >= lo[i]) & (o <= hi[i])
            tmin = np.where(parallel, np.where(inside_axis, -np.inf, np.inf), tmin)
            tmax = np.where(parallel, np.where(inside_axis, np.inf, -np.inf), tmax)
            t_near = np.max(tmin, axis=1)
            t_far = np.min(tmax, axis=1)
            axis = np.argmax(tmin, axis=1)
            hit = (t_near <= t_far) & (t_near > 0)
            better = hit & (t_near < best_t)
            best_t = np.where(better, t_near, best_t)
            best_i = np.where(better, i, best_i)
            best_axis = np.where(better, axis, best_axis)
    normals = np.zeros((n, 3))
    has = best_i >= 0
    rows = np.nonzero(has)[0]
    normals[rows, best_axis[rows]] = -np.sign(d[rows, best_axis[rows]])
    return best_t, best_i, normals


def render_depth(
    scene: SceneModel,
    K: CameraIntrinsics,
    pose: Pose,
    noise: dict | None = None,
) -> DepthFrame:
    """Analytic depth, outward normals and labels for every pixel."""
    center = pose.center
    _check_inside(scene, center)
    vv, uu = np.mgrid[0 : K.height, 0 : K.width].astype(np.float64)
    dirs = pixel_rays(K, pose, uu, vv).reshape(-1, 3)
    t, idx, normals = cast_rays(scene, center, dirs)
    forward = pose.rotation[2]
    depth = t * (dirs @ forward)
    labels = np.where(idx >= 0, scene.labels[np.maximum(idx, 0)], SemanticClass.EMPTY)
    depth = depth.reshape(K.height, K.width)
    if noise and noise.get("sigma_d", 0.0) > 0:
        rng = np.random.default_rng(noise.get("seed", 0))
        eps = rng.normal(0.0, noise["sigma_d"], size=depth.shape)
        finite = np.isfinite(depth)
        depth = np.where(finite, np.maximum(depth + eps, 1e-3), depth)
    return DepthFrame(
        depth,
        normals.reshape(K.height, K.width, 3),
        labels.reshape(K.height, K.width).astype(np.int64),
    )


def gt_occupancy(scene: SceneModel, spec: VoxelGridSpec) -> np.ndarray:
    """Labels at voxel centers, shape ``spec.dims``; smallest solid wins."""
    tol = 1e-9
    if np.any(spec.lo < scene.lo - tol) or np.any(spec.hi > scene.hi + tol):
        raise GridOutsideScene("voxel grid extends past the scene bounds")
    return label_points(scene, spec.centers().reshape(-1, 3)).reshape(spec.dims).astype(np.uint8)


def label_points(scene: SceneModel, points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.zeros(len(p), dtype=np.int64)
    order = sorted(range(len(scene.solids)), key=lambda i: (-scene.solids[i].volume, -i))
    for i in order:
        s = scene.solids[i]
        labels[s.contains(p)] = s.label
    return labels


@dataclass(frozen=True)
class TrajectorySpec:
    n_frames: int = 30
    center: tuple = (2.4, 2.4, 1.4)
    radius: float = 1.0
    start_angle: float = 0.0
    arc: float = 2 * math.pi
    target: tuple | None = (2.4, 2.4, 0.6)
    outward: float = 0.0  # >0 looks away from the center by this distance

    def __post_init__(self):
        if self.n_frames < 1:
            raise InvalidSpec("n_frames must be >= 1")


def gen_trajectory(scene: SceneModel, traj: TrajectorySpec) -> list[Pose]:
    c = np.asarray(traj.center, dtype=np.float64)
    poses = []
    prev = None
    for i in range(traj.n_frames):
        theta = traj.start_angle + traj.arc * i / traj.n_frames
        radial = np.array([math.cos(theta), math.sin(theta), 0.0])
        eye = c + traj.radius * radial
        _check_inside(scene, eye, PathLeavesBounds)
        if scene.inside_solid(eye[None])[0]:
            raise PathLeavesBounds(f"camera center {eye.round(3).tolist()} lies inside a solid")
        if traj.outward > 0 or traj.target is None:
            target = eye + max(traj.outward, 1.0) * radial + np.array([0, 0, -0.5])
        else:
            target = np.asarray(traj.target, dtype=np.float64)
        pose = look_at(eye, target)
        if prev is not None and np.linalg.norm(eye - prev) > MAX_STEP + 1e-12:
            raise InvalidSpec(
                f"consecutive camera centers {np.linalg.norm(eye - prev):.3f} m apart (max {MAX_STEP})"
            )
        prev = eye
        poses.append(pose)
    return poses


def perturb_pose(pose: Pose, frac: float, seed: int) -> Pose:
    """Jitter the translation uniformly by up to ``frac * |t|`` per axis."""
    if not 0.0 <= frac <= 0.2:
        raise FracOutOfRange(f"frac must lie in [0, 0.2], got {frac}")
    if frac == 0.0:
        return pose
    rng = np.random.default_rng(seed)
    mag = frac * float(np.linalg.norm(pose.translation))
    delta = rng.uniform(-mag, mag, size=3)
    return Pose(pose.rotation, pose.translation + delta)


def feature_map(frame: DepthFrame, K: CameraIntrinsics, depth_scale: float = 10.0) -> np.ndarray:
    """Per-pixel features: class one-hot (12) plus normalized u, v, depth (3)."""
    H, W = frame.depth.shape
    feat = np.zeros((H, W, N_CLASSES + 3))
    rows, cols = np.mgrid[0:H, 0:W]
    feat[rows, cols, frame.semantics] = 1.0
    feat[..., N_CLASSES] = cols / max(W - 1, 1)
    feat[..., N_CLASSES + 1] = rows / max(H - 1, 1)
    feat[..., N_CLASSES + 2] = np.where(np.isfinite(frame.depth), frame.depth / depth_scale, 0.0)
    return feat


def observed_mask(scene: SceneModel, K: CameraIntrinsics, pose: Pose, spec: VoxelGridSpec, tol: float = 1e-4):
    """Voxels whose centers are in the image and not hidden behind a surface.

    A voxel counts as observed when its center projects inside the image
    and the camera ray reaches the center no later than the first surface.
    Centers lying exactly on a visible face are observed.
    """
    from .geometry import project_points

    centers = spec.centers().reshape(-1, 3)
    u, v, z = project_points(K, pose, centers)
    with np.errstate(invalid="ignore"):
        frustum = (z > 1e-6) & (u >= -0.5) & (u < K.width - 0.5) & (v >= -0.5) & (v < K.height - 0.5)
    out = np.zeros(len(centers), dtype=bool)
    idx = np.nonzero(frustum)[0]
    if len(idx):
        o = pose.center
        diff = centers[idx] - o
        dist = np.linalg.norm(diff, axis=1)
        t, _, _ = cast_rays(scene, o, diff / dist[:, None])
        out[idx] = dist <= t + tol
    return out.reshape(spec.dims)
