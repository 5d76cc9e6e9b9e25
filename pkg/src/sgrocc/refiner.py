"""Anchor refinement along camera rays and semantic-adaptive planar regularization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateRay, InvalidSpec, NoSurface, NonUnitNormal, OutOfView, ResidualTooLarge
from .geometry import (
    CameraIntrinsics,
    Pose,
    backproject_pixels,
    in_image,
    pixel_rays,
    project_points,
)
from .lifter import LiftResult, bilinear
from .scene_sim import DepthFrame, SemanticClass

DELTA_MAX = 0.24
REFINE_MODES = ("none", "free3d", "ray")
GRM_KINDS = ("none", "uniform", "semantic_adaptive")
RAY_FITS = ("snap", "lifted", "lsq")  # how ray mode estimates its step

_STRUCTURAL = {SemanticClass.CEILING, SemanticClass.FLOOR, SemanticClass.WALL, SemanticClass.WINDOW}


def default_kappa(relaxed: float = 0.1) -> dict[int, float]:
    return {int(c): (1.0 if c in _STRUCTURAL else relaxed) for c in SemanticClass if c != SemanticClass.EMPTY}


@dataclass(frozen=True)
class GrmStrategy:
    kind: str = "semantic_adaptive"
    weight: float = 0.5
    kappa: dict = field(default_factory=default_kappa)

    def __post_init__(self):
        if self.kind not in GRM_KINDS:
            raise InvalidSpec(f"unknown GRM strategy {self.kind!r}")
        vals = list(self.kappa.values()) + [self.weight]
        if any(not 0.0 <= k <= 1.0 for k in vals):
            raise InvalidSpec("GRM weights must lie in [0, 1]")

    def table(self) -> np.ndarray:
        """Per-class kappa lookup indexed by class code."""
        out = np.zeros(len(SemanticClass))
        for c in SemanticClass:
            out[c] = grm_weight(c, self)
        return out


def grm_weight(cls, strategy: GrmStrategy) -> float:
    if strategy.kind == "none":
        return 0.0
    if strategy.kind == "uniform":
        return float(strategy.weight)
    return float(strategy.kappa.get(int(cls), 0.0))


def refine_anchor_ray(P_init, O_cam, delta_d: float) -> np.ndarray:
    """Move ``P_init`` by ``delta_d`` meters along the ray from the camera center."""
    P = np.asarray(P_init, dtype=np.float64)
    diff = P - np.asarray(O_cam, dtype=np.float64)
    rng = float(np.linalg.norm(diff))
    if rng <= 1e-9:
        raise DegenerateRay("anchor coincides with the camera center")
    if abs(delta_d) >= rng:
        raise ResidualTooLarge(f"|delta_d|={abs(delta_d):.3g} would cross the camera (range {rng:.3g})")
    return P + delta_d * diff / rng


def refine_anchor_free(P_init, dv, vmax: float = DELTA_MAX) -> np.ndarray:
    dv = np.asarray(dv, dtype=np.float64)
    if np.max(np.abs(dv)) > vmax:
        raise ResidualTooLarge(f"|dv|_inf={np.max(np.abs(dv)):.3g} exceeds {vmax}")
    return np.asarray(P_init, dtype=np.float64) + dv


def refine_rays(points: np.ndarray, O_cam, delta_d: np.ndarray) -> np.ndarray:
    """Vectorized ray refinement; ``delta_d`` must already be clamped."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    diff = P - np.asarray(O_cam, dtype=np.float64)
    rng = np.linalg.norm(diff, axis=1)
    if np.any(rng <= 1e-9):
        raise DegenerateRay("anchor coincides with the camera center")
    return P + np.asarray(delta_d)[:, None] * diff / rng[:, None]


EDGE_TOL = 0.16  # meters; tap spread above which a pixel straddles a depth edge


def surface_depth(depth: np.ndarray, u, v, z, edge_tol: float = EDGE_TOL) -> np.ndarray:
    """Observed depth at continuous pixels, without blending across edges.

    Where the four bilinear taps agree within ``edge_tol`` this is the
    bilinear value.  Across a silhouette a blend lies on no surface, so the
    finite tap closest to the query depth ``z`` is used instead.  Returns
    +inf where no tap is finite; callers keep (u, v) in the image.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    H, W = depth.shape
    x0 = np.clip(np.floor(u).astype(np.int64), 0, W - 1)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    taps = np.stack([depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]], axis=-1)
    blended, _ = bilinear(depth, u, v)
    fin = np.isfinite(taps)
    with np.errstate(invalid="ignore"):
        spread = np.max(np.where(fin, taps, -np.inf), axis=-1) - np.min(np.where(fin, taps, np.inf), axis=-1)
        smooth = np.all(fin, axis=-1) & (spread <= edge_tol)
        gap = np.where(fin, np.abs(taps - z[..., None]), np.inf)
    pick = np.take_along_axis(taps, np.argmin(gap, axis=-1)[..., None], axis=-1)[..., 0]
    nearest = np.where(np.any(fin, axis=-1), pick, np.inf)
    return np.where(smooth, blended, nearest)


def predict_depth_residual(anchor, depth: DepthFrame, K: CameraIntrinsics, pose: Pose, delta_max: float = DELTA_MAX) -> float:
    """Range step along the anchor's ray that lands it on the observed surface.

    The observed camera-depth gap ``D(u, v) - d_proj`` is converted to a
    step in range so the refined point has camera depth ``D(u, v)``.
    """
    u, v, z = project_points(K, pose, np.asarray(anchor)[None])
    if not (z[0] > 1e-6 and in_image(K, u[0], v[0])):
        raise OutOfView("anchor does not project into the image")
    D = surface_depth(depth.depth, u, v, z)
    if not np.isfinite(D[0]):
        raise NoSurface("no surface observed at the anchor's pixel")
    rng = float(np.linalg.norm(np.asarray(anchor, dtype=np.float64) - pose.center))
    step = (D[0] - z[0]) * rng / z[0]
    return float(np.clip(step, -delta_max, delta_max))


def _sample_points(res: LiftResult, K: CameraIntrinsics, pose: Pose):
    d = res.sample_depth
    ok = np.isfinite(d) & (res.weights > 0)
    X = backproject_pixels(K, pose, res.sample_u, res.sample_v, np.where(ok, d, 1.0))
    w = np.where(ok, res.weights, 0.0)
    return X, w


def fit_ray_residuals(points, res: LiftResult, K, pose, delta_max: float = DELTA_MAX) -> np.ndarray:
    """Weighted least-squares step along each anchor's ray toward its samples.

    Minimizes ``sum_k w_k |P + s*r - X_k|^2`` over the scalar ``s`` where
    ``X_k`` are the back-projected lifted samples.
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    X, w = _sample_points(res, K, pose)
    diff = P - pose.center
    r = diff / np.linalg.norm(diff, axis=1, keepdims=True)
    wsum = w.sum(axis=1)
    proj = np.einsum("nkc,nc->nk", X - P[:, None, :], r)
    s = np.where(wsum > 0, (w * proj).sum(axis=1) / np.where(wsum > 0, wsum, 1.0), 0.0)
    return np.clip(s, -delta_max, delta_max)


def fit_free_residuals(points, res: LiftResult, K, pose, vmax: float = DELTA_MAX) -> np.ndarray:
    """Same weighted least squares with an unconstrained 3D displacement."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    X, w = _sample_points(res, K, pose)
    wsum = w.sum(axis=1)
    centroid = np.einsum("nk,nkc->nc", w, X) / np.where(wsum > 0, wsum, 1.0)[:, None]
    dv = np.where((wsum > 0)[:, None], centroid - P, 0.0)
    return np.clip(dv, -vmax, vmax)


# --- geometric regularization -------------------------------------------------


def build_adjacency(positions: np.ndarray, labels: np.ndarray, radius: float, mode: str = "nearest") -> np.ndarray:
    """Same-class neighbour pairs ``(p, q)`` with ``p < q``.

    ``nearest`` links each anchor to its closest same-class anchor within
    ``radius``; ``radius`` links every same-class pair within ``radius``.
    """
    P = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels)
    pairs = []
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        if len(idx) < 2:
            continue
        tree = cKDTree(P[idx])
        if mode == "radius":
            pr = tree.query_pairs(radius, output_type="ndarray")
            if len(pr):
                pairs.append(idx[pr])
        elif mode == "nearest":
            dist, nn = tree.query(P[idx], k=2, distance_upper_bound=radius)
            ok = np.isfinite(dist[:, 1])
            a = idx[ok]
            b = idx[nn[ok, 1]]
            pairs.append(np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1))
        else:
            raise InvalidSpec(f"unknown adjacency mode {mode!r}")
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    out = np.unique(np.concatenate(pairs).astype(np.int64), axis=0)
    return out


def grm_loss(positions, labels, normals, pairs, strategy: GrmStrategy):
    """Planar regularization loss and its gradient w.r.t. every anchor position.

    ``L = sum_(p,q) kappa_p * (n_p . (P_p - P_q))^2``
    """
    P = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    grads = np.zeros_like(P)
    if strategy.kind == "none" or len(pairs) == 0:
        return 0.0, grads
    p, q = pairs[:, 0], pairs[:, 1]
    norms = np.linalg.norm(n[p], axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise NonUnitNormal("GRM normals must be unit length")
    kappa = strategy.table()[np.asarray(labels)[p]]
    proj = np.einsum("mc,mc->m", n[p], P[p] - P[q])
    loss = float(np.sum(kappa * proj * proj))
    g = (2.0 * kappa * proj)[:, None] * n[p]
    np.add.at(grads, p, g)
    np.add.at(grads, q, -g)
    return loss, grads


def grm_descent(positions, labels, normals, pairs, strategy: GrmStrategy, lr: float = 0.1, steps: int = 100):
    """Plain gradient descent on ``grm_loss``.  Returns ``(positions, losses)``."""
    P = np.array(positions, dtype=np.float64).reshape(-1, 3)
    losses = []
    for _ in range(steps):
        loss, g = grm_loss(P, labels, normals, pairs, strategy)
        losses.append(loss)
        P = P - lr * g
    losses.append(grm_loss(P, labels, normals, pairs, strategy)[0])
    return P, np.array(losses)


def normals_from_depth(depth: DepthFrame, K: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Per-pixel normals from cross products of depth-map finite differences."""
    H, W = depth.depth.shape
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    d = np.where(np.isfinite(depth.depth), depth.depth, np.nan)
    X = backproject_pixels(K, pose, uu, vv, d)
    dx = np.zeros_like(X)
    dy = np.zeros_like(X)
    dx[:, 1:-1] = X[:, 2:] - X[:, :-2]
    dx[:, 0] = X[:, 1] - X[:, 0]
    dx[:, -1] = X[:, -1] - X[:, -2]
    dy[1:-1] = X[2:] - X[:-2]
    dy[0] = X[1] - X[0]
    dy[-1] = X[-1] - X[-2]
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm
    view = pixel_rays(K, pose, uu, vv)
    flip = np.einsum("hwc,hwc->hw", n, view) > 0
    n = np.where(flip[..., None], -n, n)
    return np.nan_to_num(n, nan=0.0)


def snap_residuals(points, depth: DepthFrame, K: CameraIntrinsics, pose: Pose, delta_max: float = DELTA_MAX) -> np.ndarray:
    """Vectorized ``predict_depth_residual``; zero where out of view or no surface."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u, v, z = project_points(K, pose, P)
    ok = (z > 1e-6) & in_image(K, np.where(z > 1e-6, u, -1.0), np.where(z > 1e-6, v, -1.0))
    D = surface_depth(depth.depth, np.where(ok, u, 0.0), np.where(ok, v, 0.0), np.where(ok, z, 0.0))
    ok &= np.isfinite(D)
    rng = np.linalg.norm(P - pose.center, axis=1)
    zz = np.where(ok, z, 1.0)
    step = np.where(ok, (np.where(ok, D, 0.0) - zz) * rng / zz, 0.0)
    return np.clip(step, -delta_max, delta_max)


def fit_depth_residuals(points, res: LiftResult, pose: Pose, delta_max: float = DELTA_MAX, opposite=None) -> np.ndarray:
    """Range step toward the gate-weighted mean of the sampled depths.

    The camera-depth gap ``sum_k w_k (d_k - d_proj) / sum_k w_k`` is
    converted to a step along the ray.  With a single zero-offset sample
    this is exactly ``predict_depth_residual``; with several samples the
    gate decides which surface the anchor is pulled onto.
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = res.sample_depth
    w = np.where(np.isfinite(d), res.weights, 0.0)
    if opposite is not None:
        # keep a sample only if its mirror sample is usable too, so image
        # borders do not tilt the estimate on planar surfaces
        w = np.where(np.isfinite(d[:, opposite]), w, 0.0)
    wsum = w.sum(axis=1)
    has = (wsum > 1e-12) & res.front
    gap = np.einsum("nk,nk->n", w, np.where(np.isfinite(d), d, 0.0)) / np.where(has, wsum, 1.0) - np.where(has, res.d_proj, 0.0)
    z = np.where(has, res.d_proj, 1.0)
    rng = np.linalg.norm(P - pose.center, axis=1)
    step = np.where(has, gap * rng / z, 0.0)
    return np.clip(step, -delta_max, delta_max)


def mirror_index(offsets: np.ndarray) -> np.ndarray | None:
    """Index of each offset's point reflection, or None if the set is not symmetric."""
    offs = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    d = np.abs(offs[:, None, :] + offs[None, :, :]).sum(axis=2)
    j = np.argmin(d, axis=1)
    return j if np.all(d[np.arange(len(offs)), j] < 1e-9) else None
