"""Local and embodied occupancy runs plus the ablation matrix."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError, InvalidSpec
from .fusion import FusionWeights, fuse, init_fusion_weights
from .geometry import CameraIntrinsics, Pose, project_points
from .io import depth_to_pgm, grid_to_bytes, pool_to_bytes, rows_to_csv, write_bytes, write_text
from .lifter import bilinear, lift_many, logits_from_features
from .memory import Frame, GaussianPool, update_pool
from .metrics import MetricReport, SemanticVoxelGrid, decode_arrays, evaluate
from .refiner import build_adjacency, fit_free_residuals, fit_ray_residuals, grm_descent, normals_from_depth, refine_rays, snap_residuals, fit_depth_residuals, mirror_index
from .scene_sim import N_CLASSES, SceneModel, build_scene, feature_map, gen_trajectory, gt_occupancy, observed_mask, perturb_pose, render_depth

ABLATION_AXES = {
    "lift_mode": [("hard_projection", {"lifter.mode": "hard_projection"}),
                  ("deformable_no_gate", {"lifter.mode": "deformable_no_gate"}),
                  ("hard_threshold", {"lifter.mode": "hard_threshold"}),
                  ("soft_gating", {"lifter.mode": "soft_gating"})],
    "refine_mode": [("none", {"refiner.mode": "none"}),
                    ("free3d", {"refiner.mode": "free3d"}),
                    ("ray", {"refiner.mode": "ray"}),
                    ("free3d+pose_noise", {"refiner.mode": "free3d", "noise.pose_frac": 0.05}),
                    ("ray+pose_noise", {"refiner.mode": "ray", "noise.pose_frac": 0.05})],
    "grm_mode": [("none", {"refiner.grm": "none"}),
                 ("uniform", {"refiner.grm": "uniform"}),
                 ("semantic_adaptive", {"refiner.grm": "semantic_adaptive"})],
    "sigma_sweep": [(f"sigma={s}", {"lifter.sigma": s}) for s in (0.1, 0.2, 0.5, 1.0, 2.0)],
    "k_sweep": [(f"K={k}", {"lifter.K": k}) for k in (4, 8, 16, 24, 32)],
}


NORMAL_DEPTH_TOL = 0.16  # meters; two voxels


class SpatialExpert:
    """Lifts features onto anchors and refines their positions against one frame."""

    def __init__(self, cfg: RunConfig, fusion: FusionWeights):
        self.gate = cfg.gate()
        self.mode = cfg.lift_mode()
        self.samples = cfg.samples()
        self.refine = cfg.refiner.mode
        self.delta_max = cfg.refiner.delta_max
        self.iterations = cfg.refiner.iterations
        self.ray_fit = cfg.refiner.ray_fit
        self.fusion = fusion
        offs = np.zeros((1, 2)) if self.mode.kind == "hard_projection" else self.samples.resolve()[0]
        self.mirror = mirror_index(offs)

    def lift(self, P, frame: Frame):
        return lift_many(P, frame.feat, frame.depth, frame.K, frame.pose, self.gate, self.mode, self.samples)

    def refine_positions(self, P: np.ndarray, frame: Frame) -> np.ndarray:
        if self.refine == "none" or len(P) == 0:
            return P
        O = frame.pose.center
        P0 = P
        if self.refine == "ray":
            rng = np.linalg.norm(P0 - O, axis=1)
            lo = np.maximum(-self.delta_max, -0.5 * rng)
            total = np.zeros(len(P0))
            for _ in range(self.iterations):
                cur = refine_rays(P0, O, total)
                if self.ray_fit == "snap":
                    step = snap_residuals(cur, frame.depth, frame.K, frame.pose, self.delta_max)
                elif self.ray_fit == "lifted":
                    step = fit_depth_residuals(cur, self.lift(cur, frame), frame.pose, self.delta_max, self.mirror)
                else:
                    step = fit_ray_residuals(cur, self.lift(cur, frame), frame.K, frame.pose, self.delta_max)
                total = np.clip(total + step, lo, self.delta_max)
            return refine_rays(P0, O, total)
        total = np.zeros_like(P0)
        for _ in range(self.iterations):
            cur = P0 + total
            step = fit_free_residuals(cur, self.lift(cur, frame), frame.K, frame.pose, self.delta_max)
            total = np.clip(total + step, -self.delta_max, self.delta_max)
        return P0 + total

    def observe(self, P, hist, frame: Frame):
        P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
        target = self.refine_positions(P, frame)
        F_curr = self.lift(target, frame).features
        F_hist = np.zeros_like(F_curr) if hist is None else hist
        fused = fuse(F_hist, F_curr, self.fusion)
        return target, fused, logits_from_features(fused)


@dataclass
class RunResult:
    report: MetricReport
    pred: SemanticVoxelGrid
    gt: SemanticVoxelGrid
    mask: np.ndarray
    pool: GaussianPool
    frames: list = field(default_factory=list)  # per-frame metric rows (embodied)
    updates: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    scene: SceneModel | None = None

    def metrics_row(self) -> dict:
        return self.report.row()


def _setup(cfg: RunConfig):
    scene = build_scene(cfg.scene_seed, cfg.scene.room())
    K = cfg.camera.intrinsics()
    poses = gen_trajectory(scene, cfg.camera.trajectory.spec())
    grid = cfg.eval.grid()
    gt = SemanticVoxelGrid(grid, gt_occupancy(scene, grid))
    C = N_CLASSES + 3
    fusion = init_fusion_weights(C, cfg.fusion.init, cfg.seed, cfg.fusion.sigma_w)
    return scene, K, poses, grid, gt, SpatialExpert(cfg, fusion)


def _frame(cfg: RunConfig, scene, K: CameraIntrinsics, pose: Pose, index: int) -> Frame:
    noise = {"sigma_d": cfg.noise.depth_sigma, "seed": cfg.seed * 100_003 + index} if cfg.noise.depth_sigma > 0 else None
    depth = render_depth(scene, K, pose, noise)
    spawn_pose = perturb_pose(pose, cfg.noise.pose_frac, cfg.seed * 100_003 + index) if cfg.noise.pose_frac > 0 else None
    return Frame(depth, feature_map(depth, K), K, pose, spawn_pose)


def _apply_grm(cfg: RunConfig, pool: GaussianPool, rows: np.ndarray, frame: Frame) -> GaussianPool:
    """Planar regularization of the anchors in ``rows`` using normals from this frame."""
    strategy = cfg.grm()
    if strategy.kind == "none" or cfg.refiner.grm_steps == 0 or len(rows) < 2:
        return pool
    P = pool.positions[rows]
    labels = np.argmax(pool.logits[rows], axis=1)
    normals = _anchor_normals(cfg, P, frame)
    ok = np.linalg.norm(normals, axis=1) > 0.5
    sub = np.nonzero(ok & (labels > 0))[0]
    if len(sub) < 2:
        return pool
    pairs = build_adjacency(P[sub], labels[sub], cfg.refiner.grm_radius, mode="nearest")
    newP, _ = grm_descent(P[sub], labels[sub], normals[sub], pairs, strategy, cfg.refiner.grm_lr, cfg.refiner.grm_steps)
    out = pool.copy()
    out.positions[rows[sub]] = newP
    return out


def _anchor_normals(cfg: RunConfig, P: np.ndarray, frame: Frame) -> np.ndarray:
    K, pose = frame.K, frame.pose
    nmap = frame.depth.normals if cfg.refiner.normals == "gt" else normals_from_depth(frame.depth, K, pose)
    u, v, z = project_points(K, pose, P)
    ok = (z > 1e-6) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    col = np.clip(np.rint(np.where(ok, u, 0)), 0, K.width - 1).astype(np.int64)
    row = np.clip(np.rint(np.where(ok, v, 0)), 0, K.height - 1).astype(np.int64)
    # the pixel must show the anchor's own surface, not an occluder or the
    # background behind a silhouette
    ok &= np.abs(frame.depth.depth[row, col] - z) <= NORMAL_DEPTH_TOL
    n = np.where(ok[:, None], nmap[row, col], 0.0)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.where(norm > 0.5, n / np.where(norm > 0, norm, 1.0), 0.0)


def _decode(cfg: RunConfig, pool: GaussianPool, grid) -> SemanticVoxelGrid:
    _, labels = decode_arrays(pool.positions, pool.scales, pool.logits, grid, cfg.eval.theta_occ)
    return SemanticVoxelGrid(grid, labels.reshape(grid.dims))


def _step(cfg: RunConfig, pool: GaussianPool, frame: Frame, expert: SpatialExpert):
    before = set(pool.ids.tolist())
    pool, rep = update_pool(pool, frame, cfg.memory_cfg(), expert.observe)
    # regularize what this frame touched: spawned anchors and visible survivors
    touched = np.nonzero(~np.isin(pool.ids, list(before)) | (pool.tags == 1.0) & _visible(pool, frame))[0]
    pool = _apply_grm(cfg, pool, touched, frame)
    return pool, rep


def _visible(pool: GaussianPool, frame: Frame) -> np.ndarray:
    K = frame.K
    u, v, z = project_points(K, frame.pose, pool.positions)
    with np.errstate(invalid="ignore"):
        return (z > 1e-6) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)


def run_local(cfg: RunConfig, out_dir: str | Path | None = None) -> RunResult:
    """Single-frame prediction at ``camera.local_frame`` evaluated over observed voxels."""
    scene, K, poses, grid, gt, expert = _setup(cfg)
    idx = cfg.camera.local_frame
    pose = poses[idx]
    frame = _frame(cfg, scene, K, pose, idx)
    pool = GaussianPool(grid)
    pool, rep = _step(cfg, pool, frame, expert)
    pred = _decode(cfg, pool, grid)
    mask = observed_mask(scene, K, pose, grid)
    report = evaluate(pred, gt, mask)
    res = RunResult(report, pred, gt, mask, pool, updates=[rep], poses=[pose], scene=scene)
    out_dir = out_dir or cfg.output_dir
    if out_dir:
        out = Path(out_dir)
        write_bytes(out / "pred.svox", grid_to_bytes(pred))
        write_bytes(out / "gt.svox", grid_to_bytes(gt))
        write_bytes(out / "pool.gpool", pool_to_bytes(pool))
        write_bytes(out / "depth.pgm", depth_to_pgm(frame.depth.depth))
        write_text(out / "metrics.csv", rows_to_csv([report.row()]))
    return res


def run_embodied(cfg: RunConfig, out_dir: str | Path | None = None, n_frames: int | None = None) -> RunResult:
    """Stream the trajectory through the memory pool; metrics over voxels observed so far."""
    if n_frames is not None:
        cfg = cfg.with_overrides(**{"camera.trajectory.n_frames": n_frames})
    scene, K, poses, grid, gt, expert = _setup(cfg)
    out = Path(out_dir or cfg.output_dir) if (out_dir or cfg.output_dir) else None
    pool = GaussianPool(grid)
    seen = np.zeros(grid.dims, dtype=bool)
    rows, updates = [], []
    pred = None
    report = None
    for i, pose in enumerate(poses):
        frame = _frame(cfg, scene, K, pose, i)
        pool, rep = _step(cfg, pool, frame, expert)
        if len(pool) > cfg.memory.max_pool:
            raise InvalidSpec("pool exceeded max_pool")
        seen |= observed_mask(scene, K, pose, grid)
        pred = _decode(cfg, pool, grid)
        report = evaluate(pred, gt, seen)
        row = {"frame": i, "pool_size": len(pool)}
        row.update(report.row())
        row.update({f"n_{k}": v for k, v in rep.row().items() if k not in ("frame", "n_before", "n_after")})
        rows.append(row)
        updates.append(rep)
        if out is not None and (i + 1) % cfg.eval.snapshot_every == 0:
            write_bytes(out / f"pool_{i + 1:04d}.gpool", pool_to_bytes(pool))
    res = RunResult(report, pred, gt, seen, pool, rows, updates, poses, scene)
    if out is not None:
        write_text(out / "frames.csv", rows_to_csv(rows))
        write_text(out / "metrics.csv", rows_to_csv([report.row()]))
        write_bytes(out / "pred.svox", grid_to_bytes(pred))
        write_bytes(out / "gt.svox", grid_to_bytes(gt))
        write_bytes(out / "pool.gpool", pool_to_bytes(pool))
    return res


def run_ablation(cfg: RunConfig, axis: str, out_dir: str | Path | None = None, runner=run_local) -> list[dict]:
    """One local run per axis value; everything else fixed."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    rows = []
    for name, overrides in ABLATION_AXES[axis]:
        variant = cfg.with_overrides(**overrides)
        variant = dataclasses.replace(variant, output_dir=None)
        r = runner(variant)
        rows.append({"variant": name, **r.report.row()})
    out_dir = out_dir or cfg.output_dir
    if out_dir:
        write_text(Path(out_dir) / f"ablation_{axis}.csv", rows_to_csv(rows))
    return rows
