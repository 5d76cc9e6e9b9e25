"""Decoding Gaussian primitives to voxels, and voxel-level metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidSpec, SpecMismatch
from .geometry import VoxelGridSpec
from .scene_sim import N_CLASSES, SemanticClass

THETA_OCC = 0.25
CUTOFF_SIGMAS = 3.0


@dataclass(frozen=True, eq=False)
class SemanticVoxelGrid:
    spec: VoxelGridSpec
    labels: np.ndarray  # uint8, shape spec.dims

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size != self.spec.n_voxels:
            raise InvalidSpec(f"label array has {labels.size} entries, grid has {self.spec.n_voxels}")
        labels = labels.reshape(self.spec.dims).astype(np.uint8)
        if labels.size and labels.max() >= N_CLASSES:
            raise InvalidSpec("label codes must be < 12")
        object.__setattr__(self, "labels", labels)

    @property
    def occupied(self) -> np.ndarray:
        return self.labels != SemanticClass.EMPTY

    def __eq__(self, other):
        return (
            isinstance(other, SemanticVoxelGrid)
            and self.spec == other.spec
            and np.array_equal(self.labels, other.labels)
        )


def softmax(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _kernel(diff: np.ndarray, scale):
    d2 = np.sum(diff * diff, axis=-1)
    s = np.asarray(scale, dtype=np.float64)
    return d2, np.exp(-d2 / (2.0 * s * s))


def decode_arrays(positions, scales, logits, spec: VoxelGridSpec, theta_occ: float = THETA_OCC):
    """Accumulated per-class mass on every voxel (``(n_voxels, 12)``) plus labels."""
    P = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    S = np.asarray(scales, dtype=np.float64).reshape(-1)
    probs = softmax(np.asarray(logits, dtype=np.float64).reshape(-1, N_CLASSES)) if len(P) else np.zeros((0, N_CLASSES))
    acc = np.zeros((spec.n_voxels, N_CLASSES))
    if len(P):
        prim, vox, w = _voxel_pairs(P, S, spec)
        np.add.at(acc, vox, w[:, None] * probs[prim])
    return acc, _labels_from_mass(acc, theta_occ)


def _labels_from_mass(acc: np.ndarray, theta_occ: float) -> np.ndarray:
    sem = acc[:, 1:]
    total = sem.sum(axis=1)
    lab = np.argmax(sem, axis=1) + 1
    return np.where(total >= theta_occ, lab, 0).astype(np.uint8)


def _voxel_pairs(P: np.ndarray, S: np.ndarray, spec: VoxelGridSpec):
    """(primitive, voxel, kernel) triples within the cutoff, ordered by primitive."""
    res = spec.resolution
    origin = spec.lo
    dims = np.array(spec.dims)
    reach = CUTOFF_SIGMAS * S
    lo_idx = np.ceil((P - reach[:, None] - origin) / res - 0.5).astype(np.int64)
    hi_idx = np.floor((P + reach[:, None] - origin) / res - 0.5).astype(np.int64)
    span = np.max(hi_idx - lo_idx + 1) if len(P) else 0
    prims, voxs, wts = [], [], []
    if span <= 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    # group primitives by stencil width to keep arrays rectangular
    width = np.max(hi_idx - lo_idx + 1, axis=1)
    for wd in np.unique(width):
        if wd <= 0:
            continue
        sel = np.nonzero(width == wd)[0]
        r = np.arange(wd)
        st = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
        idx = lo_idx[sel][:, None, :] + st[None]
        inb = np.all((idx >= 0) & (idx < dims), axis=2) & np.all(idx <= hi_idx[sel][:, None, :], axis=2)
        centers = origin + (idx + 0.5) * res
        d2, k = _kernel(centers - P[sel][:, None, :], S[sel][:, None])
        keep = inb & (d2 <= (CUTOFF_SIGMAS * S[sel][:, None]) ** 2)
        flat = (idx[..., 0] * dims[1] + idx[..., 1]) * dims[2] + idx[..., 2]
        rows, cols = np.nonzero(keep)
        prims.append(sel[rows])
        voxs.append(flat[rows, cols])
        wts.append(k[rows, cols])
    prim = np.concatenate(prims)
    vox = np.concatenate(voxs)
    w = np.concatenate(wts)
    order = np.lexsort((vox, prim))
    return prim[order], vox[order], w[order]


def decode_pool(pool, spec: VoxelGridSpec, theta_occ: float = THETA_OCC) -> SemanticVoxelGrid:
    """Rasterize a Gaussian pool into a labeled voxel grid."""
    P, S, L = pool.arrays()[:3]
    _, labels = decode_arrays(P, S, L, spec, theta_occ)
    return SemanticVoxelGrid(spec, labels.reshape(spec.dims))


def decode_bruteforce(positions, scales, logits, spec: VoxelGridSpec, theta_occ: float = THETA_OCC):
    """Reference decode: every voxel scans the full pool in order."""
    P = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    S = np.asarray(scales, dtype=np.float64).reshape(-1)
    probs = softmax(np.asarray(logits, dtype=np.float64).reshape(-1, N_CLASSES))
    centers = spec.centers().reshape(-1, 3)
    acc = np.zeros((len(centers), N_CLASSES))
    for vi, c in enumerate(centers):
        d2, k = _kernel(c[None, :] - P, S)
        for i in np.nonzero(d2 <= (CUTOFF_SIGMAS * S) ** 2)[0]:
            acc[vi] += k[i] * probs[i]
    return acc, _labels_from_mass(acc, theta_occ)


# --- metrics ------------------------------------------------------------------


def _pair(pred, gt):
    if isinstance(pred, SemanticVoxelGrid) and isinstance(gt, SemanticVoxelGrid):
        if pred.spec != gt.spec:
            raise SpecMismatch("prediction and ground truth use different grids")
        return pred.labels, gt.labels
    a, b = np.asarray(pred), np.asarray(gt)
    if a.shape != b.shape:
        raise SpecMismatch(f"grid shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _masked(a, mask):
    return a if mask is None else a[np.asarray(mask, dtype=bool)]


def sc_iou(pred, gt, mask=None) -> float:
    a, b = _pair(pred, gt)
    pa = _masked(a, mask) != 0
    pb = _masked(b, mask) != 0
    union = int(np.count_nonzero(pa | pb))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(pa & pb)) / union


def per_class_iou(pred, gt, mask=None) -> np.ndarray:
    """IoU per semantic class 1..11; NaN where the class is absent from both."""
    a, b = _pair(pred, gt)
    a = _masked(a, mask).ravel().astype(np.int64)
    b = _masked(b, mask).ravel().astype(np.int64)
    conf = np.bincount(a * N_CLASSES + b, minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=1) - tp
    fn = conf.sum(axis=0) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    return iou[1:]


def miou(pred, gt, mask=None) -> tuple[float, np.ndarray]:
    ious = per_class_iou(pred, gt, mask)
    defined = ious[~np.isnan(ious)]
    return (float(defined.mean()) if len(defined) else math.nan), ious


_SIX = ndimage.generate_binary_structure(3, 1)
_CUBE = ndimage.generate_binary_structure(3, 3)


def boundary_voxels(occ: np.ndarray) -> np.ndarray:
    """Occupied voxels with at least one empty 6-neighbour; outside counts as empty."""
    occ = np.asarray(occ, dtype=bool)
    return occ & ~ndimage.binary_erosion(occ, structure=_SIX, border_value=0)


def boundary_f1(pred, gt, dist: int = 1, mask=None) -> float:
    a, b = _pair(pred, gt)
    ba = boundary_voxels(a != 0)
    bb = boundary_voxels(b != 0)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        ba &= m
        bb &= m
    na, nb = int(ba.sum()), int(bb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    near_b = ndimage.binary_dilation(bb, structure=_CUBE, iterations=dist) if dist > 0 else bb
    near_a = ndimage.binary_dilation(ba, structure=_CUBE, iterations=dist) if dist > 0 else ba
    precision = np.count_nonzero(ba & near_b) / na
    recall = np.count_nonzero(bb & near_a) / nb
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricReport:
    sc_iou: float
    per_class_iou: np.ndarray
    miou: float
    boundary_f1: float

    def row(self) -> dict:
        out = {"sc_iou": self.sc_iou, "miou": self.miou, "boundary_f1": self.boundary_f1}
        for c, v in zip(list(SemanticClass)[1:], self.per_class_iou):
            out[f"iou_{c.name.lower()}"] = v
        return out


def evaluate(pred, gt, mask=None) -> MetricReport:
    m, ious = miou(pred, gt, mask)
    return MetricReport(sc_iou(pred, gt, mask), ious, m, boundary_f1(pred, gt, 1, mask))
