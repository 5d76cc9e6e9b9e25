"""Gaussian memory pool with tag-based lifecycle and hybrid confidence updates.

Each primitive carries a tag: 0.0 for anchors spawned from the current
observation and 1.0 for anchors that survived at least one verification.
Per frame the pool is partitioned by a visibility check, visible anchors
are verified with

    C_final = [tag == 1] * C_geo * C_sem,   lambda = 1 - C_final

and blended toward the fresh observation by ``lambda``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidSpec, NoSurface, OutOfView, PoolOverflow
from .geometry import CameraIntrinsics, Pose, VoxelGridSpec, backproject_pixels, in_image, project_points
from .lifter import bilinear
from .scene_sim import N_CLASSES, DepthFrame

REINIT_GEO = math.exp(-4.5)  # |residual| > 3 sigma_geo
REINIT_LAMBDA = 0.5
SPAWN_LOGIT = 4.0


@dataclass(frozen=True)
class ConfidenceParams:
    sigma_geo: float = 0.5
    T: float = 0.5
    tau_min: float = 0.2
    tau_max: float = 0.8

    def __post_init__(self):
        if not (0 <= self.tau_min < self.tau_max <= 1):
            raise InvalidSpec("need 0 <= tau_min < tau_max <= 1")
        if not (self.T > 0 and self.sigma_geo > 0):
            raise InvalidSpec("temperature and sigma_geo must be positive")


@dataclass(frozen=True)
class GaussianPrimitive:
    id: int
    position: np.ndarray
    scale: float
    logits: np.ndarray
    tag: float
    last_confidence: float


@dataclass
class GaussianPool:
    """Struct-of-arrays pool.  Row order is insertion order."""

    grid: VoxelGridSpec = field(default_factory=VoxelGridSpec)
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    scales: np.ndarray = field(default_factory=lambda: np.zeros(0))
    logits: np.ndarray = field(default_factory=lambda: np.zeros((0, N_CLASSES)))
    tags: np.ndarray = field(default_factory=lambda: np.zeros(0))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))
    features: np.ndarray | None = None
    frame_counter: int = 0
    next_id: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    def arrays(self):
        return self.positions, self.scales, self.logits, self.tags, self.confidence, self.ids

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [
            GaussianPrimitive(
                int(self.ids[i]),
                self.positions[i].copy(),
                float(self.scales[i]),
                self.logits[i].copy(),
                float(self.tags[i]),
                float(self.confidence[i]),
            )
            for i in range(len(self))
        ]

    def copy(self) -> GaussianPool:
        return GaussianPool(
            self.grid,
            self.ids.copy(),
            self.positions.copy(),
            self.scales.copy(),
            self.logits.copy(),
            self.tags.copy(),
            self.confidence.copy(),
            None if self.features is None else self.features.copy(),
            self.frame_counter,
            self.next_id,
        )

    def take(self, rows) -> GaussianPool:
        rows = np.asarray(rows, dtype=np.int64)
        return GaussianPool(
            self.grid,
            self.ids[rows],
            self.positions[rows],
            self.scales[rows],
            self.logits[rows],
            self.tags[rows],
            self.confidence[rows],
            None if self.features is None else self.features[rows],
            self.frame_counter,
            self.next_id,
        )

    @staticmethod
    def concat(parts: list[GaussianPool], grid, frame_counter, next_id) -> GaussianPool:
        parts = [p for p in parts if len(p)]
        if not parts:
            return GaussianPool(grid, frame_counter=frame_counter, next_id=next_id)
        feats = None
        if any(p.features is not None for p in parts):
            C = next(p.features.shape[1] for p in parts if p.features is not None)
            feats = np.concatenate([p.features if p.features is not None else np.zeros((len(p), C)) for p in parts])
        return GaussianPool(
            grid,
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.scales for p in parts]),
            np.concatenate([p.logits for p in parts]),
            np.concatenate([p.tags for p in parts]),
            np.concatenate([p.confidence for p in parts]),
            feats,
            frame_counter,
            next_id,
        )

    def validate(self, max_pool: int | None = None):
        if len(np.unique(self.ids)) != len(self.ids):
            raise InvalidSpec("duplicate primitive ids")
        if not np.all(np.isin(self.tags, (0.0, 1.0))):
            raise InvalidSpec("tags must be 0.0 or 1.0")
        if max_pool is not None and len(self) > max_pool:
            raise PoolOverflow(f"pool holds {len(self)} > {max_pool} primitives")


# --- confidence terms -----------------------------------------------------------


def _depth_at(points, depth: DepthFrame, K: CameraIntrinsics, pose: Pose):
    u, v, z = project_points(K, pose, points)
    front = z > 1e-6
    inimg = front & in_image(K, np.where(front, u, -1), np.where(front, v, -1))
    D, _ = bilinear(depth.depth, np.where(inimg, u, -1.0), np.where(inimg, v, -1.0))
    D = np.where(inimg, D, np.nan)
    return u, v, z, inimg, D


def visibility_check(pool: GaussianPool, K, pose, depth: DepthFrame, sigma_geo: float = 0.5) -> dict:
    """Disjoint, exhaustive partition of pool rows into four visibility classes."""
    u, v, z, inimg, D = _depth_at(pool.positions, depth, K, pose)
    band = 3.0 * sigma_geo
    with np.errstate(invalid="ignore"):
        occluded = inimg & np.isfinite(D) & (z > D + band)
        conflicting = inimg & ~occluded & ~(np.abs(z - D) <= band)
    consistent = inimg & ~occluded & ~conflicting
    return {
        "visible_consistent": np.nonzero(consistent)[0],
        "visible_conflicting": np.nonzero(conflicting)[0],
        "occluded": np.nonzero(occluded)[0],
        "out_of_view": np.nonzero(~inimg)[0],
    }


def _depth_at_scalar(image: np.ndarray, u: float, v: float) -> float:
    # scalar twin of ``bilinear`` for one in-image sample
    H, W = image.shape
    x0, y0 = min(int(math.floor(u)), W - 1), min(int(math.floor(v)), H - 1)
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = u - x0, v - y0
    out = 0.0
    for w, y, x in (((1 - fx) * (1 - fy), y0, x0), (fx * (1 - fy), y0, x1), ((1 - fx) * fy, y1, x0), (fx * fy, y1, x1)):
        if w > 0:
            out += w * float(image[y, x])
    return out


def geo_confidence(P, depth: DepthFrame, K, pose, params: ConfidenceParams = ConfidenceParams()) -> float:
    x, y, z = pose.apply(np.asarray(P, dtype=np.float64)).tolist()
    if not z > 1e-6:
        raise OutOfView("point is behind the camera")
    u, v = K.fx * x / z + K.cx, K.fy * y / z + K.cy
    if not (0 <= u <= K.width - 1 and 0 <= v <= K.height - 1):
        raise OutOfView("point does not project into the image")
    D = _depth_at_scalar(depth.depth, u, v)
    if not math.isfinite(D):
        raise NoSurface("no surface at the projected pixel")
    r = z - D
    return float(math.exp(-(r * r) / (2 * params.sigma_geo**2)))


def geo_confidence_many(points, depth, K, pose, params: ConfidenceParams) -> np.ndarray:
    """Vectorized geometric confidence; zero where out of view or no surface."""
    _, _, z, inimg, D = _depth_at(points, depth, K, pose)
    ok = inimg & np.isfinite(D)
    r = np.where(ok, z - np.where(ok, D, 0.0), 0.0)
    return np.where(ok, np.exp(-(r * r) / (2 * params.sigma_geo**2)), 0.0)


def calibrate_semantic(l_sem, params: ConfidenceParams = ConfidenceParams()):
    """Temperature-scaled softmax and the clamped confidence of its peak."""
    z = np.asarray(l_sem, dtype=np.float64) / params.T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    c = np.clip((p.max(axis=-1) - params.tau_min) / (params.tau_max - params.tau_min), 0.0, 1.0)
    return p, c


def final_confidence(tag, C_geo, C_sem):
    old = np.asarray(tag) == 1.0
    c = np.where(old, np.asarray(C_geo) * np.asarray(C_sem), 0.0)
    if np.ndim(c) == 0:
        c = float(c)
    return c, 1.0 - c


# --- spawning -----------------------------------------------------------------


def _block_pixels(H: int, W: int, stride: int):
    # the central pixel of each block (upper-left of the middle for even
    # strides); an integer pixel so the anchor never sits on a blended depth
    rows = np.arange(0, H, stride)
    cols = np.arange(0, W, stride)
    v = rows + (np.minimum(stride, H - rows) - 1) // 2
    u = cols + (np.minimum(stride, W - cols) - 1) // 2
    vv, uu = np.meshgrid(v, u, indexing="ij")
    return uu.ravel(), vv.ravel()


def spawn_anchors(
    depth: DepthFrame,
    K: CameraIntrinsics,
    pose: Pose,
    stride: int,
    coverage: np.ndarray | None = None,
    cover_radius: float = 0.08,
    scale: float = 0.04,
    start_id: int = 0,
    self_cover: bool = False,
) -> GaussianPool:
    """One new anchor per ``stride x stride`` block with finite depth.

    Blocks whose back-projected point lies within ``cover_radius`` of a
    point in ``coverage`` are skipped.  With ``self_cover`` the anchors
    accepted earlier in raster order also count as coverage.
    """
    if stride < 1:
        raise InvalidSpec("stride must be >= 1")
    H, W = depth.depth.shape
    u, v = _block_pixels(H, W, stride)
    D = depth.depth[v, u]
    ok = np.isfinite(D)
    u, v, D = u[ok], v[ok], D[ok]
    pts = backproject_pixels(K, pose, u.astype(np.float64), v.astype(np.float64), D)
    keep = np.ones(len(pts), dtype=bool)
    if coverage is not None and len(coverage):
        tree = cKDTree(np.asarray(coverage).reshape(-1, 3))
        dist, _ = tree.query(pts, k=1, distance_upper_bound=cover_radius * (1 + 1e-9))
        keep &= ~(dist <= cover_radius)
    if self_cover:
        keep &= _greedy_cover(pts, keep, cover_radius)
    pts, u, v = pts[keep], u[keep], v[keep]
    cls = depth.semantics[v, u]
    n = len(pts)
    logits = np.zeros((n, N_CLASSES))
    logits[np.arange(n), cls] = SPAWN_LOGIT
    return GaussianPool(
        ids=np.arange(start_id, start_id + n, dtype=np.int64),
        positions=pts,
        scales=np.full(n, float(scale)),
        logits=logits,
        tags=np.zeros(n),
        confidence=np.zeros(n),
        next_id=start_id + n,
    )


def _greedy_cover(pts: np.ndarray, allowed: np.ndarray, radius: float) -> np.ndarray:
    """Raster-order greedy thinning: keep a point unless an earlier kept one is within ``radius``."""
    cells: dict[tuple, list[int]] = {}
    keep = np.zeros(len(pts), dtype=bool)
    r2 = radius * radius
    keys = np.floor(pts / radius).astype(np.int64)
    for i in np.nonzero(allowed)[0]:
        kx, ky, kz = keys[i]
        p = pts[i]
        hit = False
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for j in cells.get((kx + dx, ky + dy, kz + dz), ()):
                        d = pts[j] - p
                        if d @ d <= r2:
                            hit = True
                            break
                    if hit:
                        break
                if hit:
                    break
            if hit:
                break
        if not hit:
            keep[i] = True
            cells.setdefault((kx, ky, kz), []).append(i)
    return keep


# --- update -------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryConfig:
    confidence: ConfidenceParams = ConfidenceParams()
    max_pool: int = 50_000
    stride: int = 2
    anchor_scale: float = 0.04
    cover_radius: float = 0.08
    self_cover: bool = True

    def __post_init__(self):
        if self.max_pool < 1 or self.stride < 1:
            raise InvalidSpec("max_pool and stride must be >= 1")


@dataclass
class Frame:
    depth: DepthFrame
    feat: np.ndarray
    K: CameraIntrinsics
    pose: Pose
    spawn_pose: Pose | None = None


@dataclass
class UpdateReport:
    frame: int
    n_before: int
    visible_consistent: int = 0
    visible_conflicting: int = 0
    occluded: int = 0
    out_of_view: int = 0
    discarded: int = 0
    frozen: int = 0
    updated: int = 0
    reinitialized: int = 0
    spawned: int = 0
    evicted: int = 0
    n_after: int = 0
    lambdas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    c_geo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    c_sem: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def row(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if not isinstance(v, np.ndarray)}


# ``observe(positions, frame) -> (target_positions, features, fresh_logits)``
ObserveFn = Callable[[np.ndarray, np.ndarray | None, Frame], tuple]


def update_pool(pool: GaussianPool, frame: Frame, cfg: MemoryConfig, observe: ObserveFn):
    """One streaming step.  Returns ``(new_pool, report)``; the input is untouched.

    ``observe`` lifts and refines a batch of anchors against the frame,
    given their positions and stored features (None for new anchors), and
    returns fully-refined positions (lambda = 1), fused features and fresh
    logits.
    """
    conf = cfg.confidence
    K, pose, depth = frame.K, frame.pose, frame.depth
    rep = UpdateReport(frame=pool.frame_counter, n_before=len(pool))
    next_id = pool.next_id
    parts = visibility_check(pool, K, pose, depth, conf.sigma_geo)
    for k, idx in parts.items():
        setattr(rep, k, len(idx))

    kept_out = pool.take(parts["out_of_view"])
    occ = parts["occluded"]
    kept_occ = pool.take(occ[pool.tags[occ] == 1.0])
    rep.discarded = int(np.sum(pool.tags[occ] == 0.0))

    vis = np.sort(np.concatenate([parts["visible_consistent"], parts["visible_conflicting"]]))
    updated = GaussianPool(pool.grid)
    reinit_pts = np.zeros((0, 3))
    if len(vis):
        cur = pool.take(vis)
        c_geo = geo_confidence_many(cur.positions, depth, K, pose, conf)
        _, c_sem = calibrate_semantic(cur.logits, conf)
        c_fin, lam = final_confidence(cur.tags, c_geo, c_sem)
        rep.lambdas, rep.c_geo, rep.c_sem = lam, c_geo, c_sem
        reinit = (lam > REINIT_LAMBDA) & (c_geo < REINIT_GEO)
        u, v, _, _, D = _depth_at(cur.positions, depth, K, pose)
        has_surface = np.isfinite(D)
        rep.reinitialized = int(np.sum(reinit & has_surface))
        rep.discarded += int(np.sum(reinit & ~has_surface))
        r_rows = np.nonzero(reinit & has_surface)[0]
        reinit_pts = backproject_pixels(K, pose, u[r_rows], v[r_rows], D[r_rows]).reshape(-1, 3)

        stay = np.nonzero(~reinit)[0]
        if len(stay):
            cur = cur.take(stay)
            lam_s = lam[stay]
            target, feats, fresh = observe(cur.positions, cur.features, frame)
            cur.positions = cur.positions + lam_s[:, None] * (target - cur.positions)
            cur.logits = (1.0 - lam_s)[:, None] * cur.logits + lam_s[:, None] * fresh
            cur.features = feats
            cur.confidence = c_fin[stay]
            cur.tags = np.ones(len(stay))
            rep.frozen = int(np.sum(lam_s < 0.1))
            rep.updated = len(stay) - rep.frozen
            updated = cur

    survivors = GaussianPool.concat([kept_out, kept_occ, updated], pool.grid, pool.frame_counter, next_id)
    # restore insertion (id) order so results do not depend on partition order
    survivors = survivors.take(np.argsort(survivors.ids, kind="stable"))

    spawn_pose = frame.spawn_pose or pose
    fresh = spawn_anchors(
        depth,
        K,
        spawn_pose,
        cfg.stride,
        coverage=np.concatenate([survivors.positions, reinit_pts]),
        cover_radius=cfg.cover_radius,
        scale=cfg.anchor_scale,
        start_id=next_id,
        self_cover=cfg.self_cover,
    )
    if len(reinit_pts):
        fresh_re = _new_anchors(reinit_pts, cfg.anchor_scale, fresh.next_id)
        fresh = GaussianPool.concat([fresh_re, fresh], pool.grid, 0, fresh_re.next_id)
        fresh.ids = np.arange(next_id, next_id + len(fresh), dtype=np.int64)
    next_id += len(fresh)
    if len(fresh):
        target, feats, logits = observe(fresh.positions, None, frame)
        fresh.positions = target
        fresh.features = feats
        fresh.logits = logits
    rep.spawned = len(fresh)
    if len(fresh) > cfg.max_pool:
        raise PoolOverflow(f"{len(fresh)} new anchors exceed max_pool={cfg.max_pool}")

    out = GaussianPool.concat([survivors, fresh], pool.grid, pool.frame_counter + 1, next_id)
    if len(out) > cfg.max_pool:
        n_drop = len(out) - cfg.max_pool
        order = np.lexsort((-out.ids, out.confidence))
        drop = np.zeros(len(out), dtype=bool)
        drop[order[:n_drop]] = True
        out = out.take(np.nonzero(~drop)[0])
        rep.evicted = n_drop
    out.frame_counter = pool.frame_counter + 1
    out.next_id = next_id
    rep.n_after = len(out)
    return out, rep


def _new_anchors(points: np.ndarray, scale: float, start_id: int) -> GaussianPool:
    n = len(points)
    return GaussianPool(
        ids=np.arange(start_id, start_id + n, dtype=np.int64),
        positions=np.asarray(points, dtype=np.float64).reshape(-1, 3),
        scales=np.full(n, float(scale)),
        logits=np.zeros((n, N_CLASSES)),
        tags=np.zeros(n),
        confidence=np.zeros(n),
        next_id=start_id + n,
    )
