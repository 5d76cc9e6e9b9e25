"""Depth-gated deformable lifting of 2D features onto 3D query points.

A query point is projected into the image; ``K`` samples around the
reference pixel are read from the feature map and the predicted depth
map, each weighted by an attention weight and a Gaussian depth gate::

    F3D(q) = sum_k A_k * G(d_proj, d_k) * F2D(p_ref + dp_k)
    G(a, b) = alpha * exp(-(a - b)^2 / (2 sigma^2))

Four lifting modes share one code path (see ``LiftMode``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadPattern, BehindCamera, InvalidSpec
from .geometry import CameraIntrinsics, Pose, in_image, project_point, project_points
from .scene_sim import N_CLASSES, DepthFrame

SIGMA_MIN = 1e-3
LIFT_MODES = ("hard_projection", "deformable_no_gate", "hard_threshold", "soft_gating")


@dataclass(frozen=True)
class GateParams:
    alpha: float = 1.0
    sigma: float = 0.5

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidSpec(f"alpha must be >= 0, got {self.alpha}")
        if not self.sigma > 0:
            raise InvalidSpec(f"sigma must be > 0, got {self.sigma}")

    def clamped(self) -> GateParams:
        return GateParams(max(self.alpha, 0.0), max(self.sigma, SIGMA_MIN))


@dataclass(frozen=True)
class LiftMode:
    kind: str = "soft_gating"
    tau: float = 0.5

    def __post_init__(self):
        if self.kind not in LIFT_MODES:
            raise InvalidSpec(f"unknown lift mode {self.kind!r}; expected one of {LIFT_MODES}")
        if self.kind == "hard_threshold" and not 0 < self.tau <= 1:
            raise InvalidSpec(f"tau must lie in (0, 1], got {self.tau}")


@dataclass(frozen=True)
class SampleConfig:
    K: int = 16
    pattern: str = "ring"
    radius: float = 2.0
    normalize_gate: bool = False
    offsets: tuple | None = None  # externally supplied (dx, dy) pairs
    attention: tuple | None = None  # externally supplied A_k

    def resolve(self) -> tuple[np.ndarray, np.ndarray]:
        if self.offsets is not None:
            offs = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 2)
        else:
            offs = gen_offsets((0.0, 0.0), self.K, self.pattern, self.radius)
        if self.attention is not None:
            att = np.asarray(self.attention, dtype=np.float64)
            if att.shape != (len(offs),) or np.any(att < 0) or abs(att.sum() - 1.0) > 1e-9:
                raise InvalidSpec("attention weights must be non-negative, one per offset, summing to 1")
        else:
            att = np.full(len(offs), 1.0 / len(offs))
        return offs, att


def gen_offsets(p_ref, K: int, pattern: str = "ring", radius: float = 2.0) -> np.ndarray:
    """Deterministic sampling offsets, symmetric about zero.  Shape ``(K, 2)``."""
    if K < 1 or not radius > 0:
        raise BadPattern(f"need K >= 1 and radius > 0, got K={K}, radius={radius}")
    if K == 1:
        return np.zeros((1, 2))
    if pattern == "grid":
        n = math.isqrt(K)
        if n * n != K:
            raise BadPattern(f"grid pattern needs a perfect-square K, got {K}")
        ticks = np.linspace(-radius, radius, n)
        xx, yy = np.meshgrid(ticks, ticks, indexing="xy")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)
    if pattern == "ring":
        ang = 2 * np.pi * np.arange(K) / K
        offs = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        offs[np.abs(offs) < 1e-12] = 0.0
        return offs
    raise BadPattern(f"unknown pattern {pattern!r}")


def gaussian_gate(d_proj, d_pred_k, g: GateParams):
    r = np.subtract(d_proj, d_pred_k)
    return g.alpha * np.exp(-(r * r) / (2.0 * g.sigma * g.sigma))


def gate_gradients(d_proj, d_pred_k, g: GateParams) -> dict:
    """Analytic partials of the gate w.r.t. alpha, sigma and the sampled depth."""
    r = np.subtract(d_proj, d_pred_k)
    e = np.exp(-(r * r) / (2.0 * g.sigma * g.sigma))
    G = g.alpha * e
    return {
        "alpha": e,
        "sigma": G * r * r / g.sigma**3,
        "d_pred": G * r / g.sigma**2,
    }


def bilinear(image: np.ndarray, u, v):
    """Bilinear samples of ``image`` (H, W[, C]) at continuous pixel coords.

    Returns ``(values, valid)``; invalid (out-of-image) samples are zero.
    Infinite neighbours with non-zero weight propagate +inf.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    H, W = image.shape[:2]
    valid = in_image(_Dims(W, H), u, v)
    uu = np.where(valid, u, 0.0)
    vv = np.where(valid, v, 0.0)
    x0 = np.minimum(np.floor(uu).astype(np.int64), W - 1)
    y0 = np.minimum(np.floor(vv).astype(np.int64), H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = uu - x0
    fy = vv - y0
    wts = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    taps = (image[y0, x0], image[y0, x1], image[y1, x0], image[y1, x1])
    extra = (slice(None),) * u.ndim + (None,) * (image.ndim - 2)
    out = 0.0
    for w, a in zip(wts, taps):
        w = w[extra]
        with np.errstate(invalid="ignore"):
            out = out + np.where(w > 0, w * a, 0.0)
    out = np.where(valid[extra], out, 0.0)
    return out, valid


@dataclass(frozen=True)
class _Dims:
    width: int
    height: int


@dataclass
class LiftResult:
    """Batched lifting output for ``N`` queries and ``K`` samples."""

    features: np.ndarray  # (N, C)
    weights: np.ndarray  # (N, K) effective A_k * G_k (after normalization if enabled)
    gates: np.ndarray  # (N, K) G_k
    sample_u: np.ndarray  # (N, K)
    sample_v: np.ndarray
    sample_depth: np.ndarray  # (N, K), +inf where no surface or out of view
    d_proj: np.ndarray  # (N,)
    front: np.ndarray  # (N,) query in front of the camera


def _mode_gate(d_proj, d_k, g: GateParams, mode: LiftMode):
    if mode.kind in ("hard_projection", "deformable_no_gate"):
        return np.ones(np.shape(d_k))
    with np.errstate(invalid="ignore"):
        G = gaussian_gate(d_proj, d_k, g)
    G = np.where(np.isfinite(d_k), G, 0.0)
    if mode.kind == "hard_threshold":
        ratio = G / g.alpha if g.alpha > 0 else G
        return np.where(ratio >= mode.tau, 1.0, 0.0)
    return G


def lift_many(
    points: np.ndarray,
    feat: np.ndarray,
    depth: DepthFrame | np.ndarray,
    K: CameraIntrinsics,
    pose: Pose,
    g: GateParams,
    mode: LiftMode,
    samples: SampleConfig,
) -> LiftResult:
    """Lift features for many query points at once.

    Queries behind the camera get zero features and ``front=False``.
    """
    dmap = depth.depth if isinstance(depth, DepthFrame) else np.asarray(depth)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u, v, z = project_points(K, pose, pts)
    front = z > 1e-6
    if mode.kind == "hard_projection":
        offs, att = np.zeros((1, 2)), np.ones(1)
    else:
        offs, att = samples.resolve()
    su = u[:, None] + offs[None, :, 0]
    sv = v[:, None] + offs[None, :, 1]
    su = np.where(front[:, None], su, -1.0)
    sv = np.where(front[:, None], sv, -1.0)
    f_s, valid = bilinear(feat, su, sv)
    d_s, _ = bilinear(dmap, su, sv)
    d_s = np.where(valid, d_s, np.inf)
    G = _mode_gate(z[:, None], d_s, g, mode)
    G = np.where(valid, G, 0.0)
    w = att[None, :] * G
    if samples.normalize_gate:
        w = w / (w.sum(axis=1, keepdims=True) + 1e-8)
    F = np.einsum("nk,nkc->nc", w, f_s)
    F = np.where(front[:, None], F, 0.0)
    return LiftResult(F, w, G, su, sv, np.where(front[:, None], d_s, np.inf), np.where(front, z, np.nan), front)


def lift_feature(q, feat, depth, K, pose, g: GateParams, mode: LiftMode, samples: SampleConfig) -> np.ndarray:
    """Lifted feature vector for a single query point."""
    project_point(K, pose, q)  # raises BehindCamera
    return lift_many(np.asarray(q)[None], feat, depth, K, pose, g, mode, samples).features[0]


def logits_from_features(F: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Class logits from lifted features.

    Semantic channels give class evidence; missing mass (suppressed or
    out-of-view samples) counts as evidence for the empty class.
    """
    F = np.atleast_2d(F)
    cls = np.clip(F[:, :N_CLASSES], 0.0, None)
    deficit = np.clip(1.0 - cls.sum(axis=1), 0.0, None)
    p = cls.copy()
    p[:, 0] += deficit
    p /= p.sum(axis=1, keepdims=True)
    return np.log(p + eps)


def gate_heatmap(
    feat_shape: tuple,
    depth: DepthFrame,
    K: CameraIntrinsics,
    pose: Pose,
    g: GateParams,
    centers: np.ndarray,
    mode: LiftMode = LiftMode(),
    samples: SampleConfig = SampleConfig(),
) -> np.ndarray:
    """Total gate weight per voxel column, summed over height (BEV view).

    ``centers`` has shape (nx, ny, nz, 3).
    """
    nx, ny, nz, _ = centers.shape
    dummy = np.zeros(depth.depth.shape + (1,))
    res = lift_many(centers.reshape(-1, 3), dummy, depth, K, pose, g, mode, samples)
    return res.weights.sum(axis=1).reshape(nx, ny, nz).sum(axis=2)


__all__ = [
    "GateParams",
    "LiftMode",
    "LiftResult",
    "SampleConfig",
    "BehindCamera",
    "bilinear",
    "gate_gradients",
    "gate_heatmap",
    "gaussian_gate",
    "gen_offsets",
    "lift_feature",
    "lift_many",
    "logits_from_features",
]
