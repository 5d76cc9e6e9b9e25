"""The acceptance suite: one pass/fail verdict per criterion, with timings.

Each check is self-contained and deterministic.  ``run_acceptance`` runs
all of them (or a chosen subset) on the packaged bench configs; the CLI
``check`` subcommand and ``tests/test_acceptance.py`` both call it.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .fusion import (
    FusionWeights,
    ModuleGroup,
    TrainingSchedule,
    fuse,
    init_fusion_weights,
    lr_multiplier,
    make_toy_dataset,
    train_fusion_toy,
)
from .geometry import CameraIntrinsics, look_at
from .gradcheck import check_gradients
from .io import csv_to_rows, depth_from_pgm, depth_to_pgm, grid_from_bytes, grid_to_bytes, pool_from_bytes, pool_to_bytes, rows_to_csv
from .lifter import GateParams, gaussian_gate
from .memory import ConfidenceParams, calibrate_semantic, final_confidence, geo_confidence
from .pipeline import run_ablation, run_embodied
from .refiner import refine_anchor_ray
from .scene_sim import STRUCTURAL, DepthFrame, SemanticClass

REL_TOL = 1e-9


@dataclass(frozen=True)
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float
    budget: float

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"[{verdict}] {self.number:2d} {self.name} ({self.seconds:.1f}s / {self.budget:.0f}s): {self.detail}"


# --- straight-line oracles ------------------------------------------------------


def gate_oracle(d_proj: float, d_pred: float, alpha: float, sigma: float) -> float:
    r = d_proj - d_pred
    return alpha * math.exp(-(r * r) / (2.0 * sigma * sigma))


def project_oracle(K: CameraIntrinsics, R, t, P):
    x = R[0][0] * P[0] + R[0][1] * P[1] + R[0][2] * P[2] + t[0]
    y = R[1][0] * P[0] + R[1][1] * P[1] + R[1][2] * P[2] + t[1]
    z = R[2][0] * P[0] + R[2][1] * P[1] + R[2][2] * P[2] + t[2]
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, z


def bilinear_oracle(img, u: float, v: float) -> float:
    H, W = len(img), len(img[0])
    x0, y0 = min(int(math.floor(u)), W - 1), min(int(math.floor(v)), H - 1)
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = u - x0, v - y0
    acc = 0.0
    for w, (yy, xx) in (((1 - fx) * (1 - fy), (y0, x0)), (fx * (1 - fy), (y0, x1)), ((1 - fx) * fy, (y1, x0)), (fx * fy, (y1, x1))):
        if w > 0:
            acc += w * img[yy][xx]
    return acc


def geo_confidence_oracle(P, img, K, R, t, sigma_geo: float) -> float:
    u, v, z = project_oracle(K, R, t, P)
    r = z - bilinear_oracle(img, u, v)
    return math.exp(-(r * r) / (2.0 * sigma_geo * sigma_geo))


def calibrate_oracle(logits, T: float, tau_min: float, tau_max: float):
    top = max(logits)
    e = [math.exp((x - top) / T) for x in logits]
    s = sum(e)
    p = [x / s for x in e]
    c = (max(p) - tau_min) / (tau_max - tau_min)
    return p, min(max(c, 0.0), 1.0)


def final_confidence_oracle(tag: float, c_geo: float, c_sem: float):
    c = c_geo * c_sem if tag == 1.0 else 0.0
    return c, 1.0 - c


def refine_ray_oracle(P, O, dd: float):
    diff = [P[i] - O[i] for i in range(3)]
    n = math.sqrt(diff[0] ** 2 + diff[1] ** 2 + diff[2] ** 2)
    return [P[i] + dd * diff[i] / n for i in range(3)]


def fuse_oracle(Fh, Fc, Wh, Wc, b):
    C = len(b)
    out, scale = [], []
    for i in range(C):
        acc, mag = b[i], abs(b[i])
        for j in range(C):
            acc += Wh[i][j] * Fh[j] + Wc[i][j] * Fc[j]
            mag += abs(Wh[i][j] * Fh[j]) + abs(Wc[i][j] * Fc[j])
        out.append(acc)
        scale.append(mag)
    return out, scale


# --- criteria -------------------------------------------------------------------


def equation_fidelity(n: int = 10_000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    rec: dict = {}

    def record(name, g, w, s):
        # flat lists of (ours, oracle, magnitude) compared in one pass below
        r = rec.setdefault(name, ([], [], []))
        r[0].extend(np.ravel(g).tolist())
        r[1].extend(w)
        r[2].extend(s)

    gate_in = np.column_stack([rng.uniform(0, 2, n), rng.uniform(1e-3, 3, n), rng.uniform(0.1, 8, n), rng.uniform(0.1, 8, n)])
    for a, s, dp, dk in gate_in.tolist():
        g = float(gaussian_gate(dp, dk, GateParams(a, s)))
        w = gate_oracle(dp, dk, a, s)
        record("gaussian_gate", g, [w], [max(abs(g), abs(w))])

    T = rng.uniform(0.05, 3, n)
    lo = rng.uniform(0, 0.5, n)
    hi = lo + 1e-3 + rng.uniform(0, 1, n) * (1 - lo - 1e-3)
    logits = rng.normal(0, 5, (n, 12))
    for i in range(n):
        p, c = calibrate_semantic(logits[i], ConfidenceParams(0.5, T[i], lo[i], hi[i]))
        po, co = calibrate_oracle(logits[i].tolist(), T[i], lo[i], hi[i])
        record("calibrate_semantic", np.append(p, c), po + [co], np.append(np.maximum(p, po), 1.0).tolist())

    for tag, cg, cs in zip(rng.integers(0, 2, n).astype(float).tolist(), rng.uniform(size=n).tolist(), rng.uniform(size=n).tolist()):
        record("final_confidence", np.asarray(final_confidence(tag, cg, cs)), list(final_confidence_oracle(tag, cg, cs)), [1.0, 1.0])

    Ps, Os, frac = rng.normal(0, 3, (n, 3)), rng.normal(0, 3, (n, 3)), rng.uniform(-0.99, 0.99, n)
    ranges = np.linalg.norm(Ps - Os, axis=1)
    for i in np.nonzero(ranges > 1e-3)[0]:
        dd = float(frac[i] * ranges[i])
        record("refine_anchor_ray", refine_anchor_ray(Ps[i], Os[i], dd), refine_ray_oracle(Ps[i].tolist(), Os[i].tolist(), dd),
               (np.abs(Ps[i]) + abs(dd)).tolist())

    for C in rng.integers(1, 7, n).tolist():
        Wh, Wc, b = rng.normal(size=(C, C)), rng.normal(size=(C, C)), rng.normal(size=C)
        Fh, Fc = rng.normal(size=C), rng.normal(size=C)
        out, mag = fuse_oracle(Fh.tolist(), Fc.tolist(), Wh.tolist(), Wc.tolist(), b.tolist())
        record("fuse", fuse(Fh, Fc, FusionWeights(Wh, Wc, b)), out, mag)

    # geometric confidence on random cameras over a smooth random depth map
    K = CameraIntrinsics(30.0, 30.0, 15.5, 11.5, 32, 24)
    m = n // 100
    for _ in range(100):
        eye = rng.uniform(-1, 1, 3)
        pose = look_at(eye, eye + np.array([0.0, 1.0, 0.0]) + rng.normal(0, 0.2, 3))
        img = 2.0 + rng.uniform(0, 3) + rng.uniform(-0.5, 0.5, (K.height, K.width)).cumsum(axis=1) * 0.1
        frame = DepthFrame(img, np.zeros(img.shape + (3,)), np.zeros(img.shape, dtype=np.int64))
        params = ConfidenceParams(rng.uniform(0.05, 2))
        R, t, rows = pose.rotation.tolist(), pose.translation.tolist(), img.tolist()
        u, v = rng.uniform(0, K.width - 1, m), rng.uniform(0, K.height - 1, m)
        rays = np.column_stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones(m)]) @ pose.rotation
        pts = pose.center + rays * rng.uniform(1, 5, (m, 1))
        for P in pts:
            record("geo_confidence", geo_confidence(P, frame, K, pose, params),
                   [geo_confidence_oracle(P.tolist(), rows, K, R, t, params.sigma_geo)], [1.0])

    failures = {}
    for name, (g, w, s) in rec.items():
        g, w, s = np.array(g), np.array(w), np.array(s)
        bad = int(np.sum(~(np.abs(g - w) <= REL_TOL * np.maximum(s, 1e-300))))
        if bad:
            failures[name] = bad
    detail = f"all {len(rec)} match" if not failures else "mismatches " + ", ".join(f"{k}={v}" for k, v in failures.items())
    return not failures, detail


def identity_cold_start(n: int = 10_000, seeds=(0, 1, 2, 3, 4), seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    exact = 0
    for _ in range(n):
        C = int(rng.integers(1, 16))
        Fh, Fc = rng.normal(0, 10, C), rng.normal(0, 10, C)
        out = fuse(Fh, Fc, init_fusion_weights(C, "identity"))
        exact += out.tobytes() == Fc.tobytes()
    data = make_toy_dataset()
    ident = train_fusion_toy(data, "identity").step0_loss
    rand = [train_fusion_toy(data, "random", seed=s, sigma_w=0.5).step0_loss for s in seeds]
    ok = exact == n and all(ident <= r for r in rand)
    return ok, f"bit-exact {exact}/{n}; step-0 loss identity {ident:.4f} vs random min {min(rand):.4f}"


def gradient_checks(trials: int = 100) -> tuple[bool, str]:
    reports = [check_gradients(op, trials) for op in ("gate", "grm", "fusion")]
    return all(r.passed for r in reports), "; ".join(f"{r.op} max rel err {r.max_rel_err:.2e}" for r in reports)


def _by_variant(rows):
    return {r["variant"]: r for r in rows}


def lift_ordering(cfg: RunConfig) -> tuple[bool, str]:
    rows = _by_variant(run_ablation(cfg, "lift_mode"))
    ok = True
    parts = []
    for m in ("sc_iou", "boundary_f1"):
        s, t = rows["soft_gating"][m], rows["hard_threshold"][m]
        d, h = rows["deformable_no_gate"][m], rows["hard_projection"][m]
        ok &= s >= t >= max(d, h)
        parts.append(f"{m} soft {s:.4f} thr {t:.4f} def {d:.4f} hard {h:.4f}")
    margin = rows["soft_gating"]["sc_iou"] - rows["hard_projection"]["sc_iou"]
    ok &= margin >= 0.02
    parts.append(f"soft-hard sc margin {margin:+.4f} (need >= 0.02)")
    return bool(ok), "; ".join(parts)


def refine_ordering(cfg: RunConfig) -> tuple[bool, str]:
    rows = _by_variant(run_ablation(cfg, "refine_mode"))
    sc = {k: v["sc_iou"] for k, v in rows.items()}
    order = sc["ray"] >= sc["free3d"] >= sc["none"]
    d_ray = sc["ray"] - sc["ray+pose_noise"]
    d_free = sc["free3d"] - sc["free3d+pose_noise"]
    ok = order and d_ray <= d_free
    return ok, (f"sc ray {sc['ray']:.4f} free3d {sc['free3d']:.4f} none {sc['none']:.4f}; "
                f"pose-noise drop ray {d_ray:.4f} vs free3d {d_free:.4f}")


def object_iou(row: dict) -> float:
    vals = [v for k, v in row.items() if k.startswith("iou_") and v == v
            and SemanticClass[k[4:].upper()] not in STRUCTURAL]
    return float(np.mean(vals)) if vals else float("nan")


def grm_ordering(cfg: RunConfig) -> tuple[bool, str]:
    rows = _by_variant(run_ablation(cfg, "grm_mode"))
    w = [rows[k]["iou_wall"] for k in ("none", "uniform", "semantic_adaptive")]
    o = [object_iou(rows[k]) for k in ("uniform", "semantic_adaptive")]
    ok = w[2] >= w[1] >= w[0] and o[1] >= o[0] and (w[2] > w[1] or w[1] > w[0] or o[1] > o[0])
    return ok, f"wall none {w[0]:.4f} uniform {w[1]:.4f} adaptive {w[2]:.4f}; objects uniform {o[0]:.4f} adaptive {o[1]:.4f}"


def sigma_inverted_u(cfg: RunConfig) -> tuple[bool, str]:
    rows = run_ablation(cfg, "sigma_sweep")
    f1 = [r["boundary_f1"] for r in rows]
    ok = max(f1[1:-1]) > max(f1[0], f1[-1])
    return ok, "boundary_f1 " + " ".join(f"{r['variant']}:{r['boundary_f1']:.4f}" for r in rows)


_EMBODIED: dict = {}


def _embodied(cfg: RunConfig):
    # pool hygiene and embodied sanity share one run
    key = repr(cfg)
    if key not in _EMBODIED:
        _EMBODIED.clear()
        _EMBODIED[key] = run_embodied(cfg)
    return _EMBODIED[key]


def stale_occluded_oracle(pool, frame_depth: np.ndarray, K, pose, sigma_geo: float) -> int:
    """Brute-force count of unverified anchors the final pose sees as occluded."""
    R, t = pose.rotation.tolist(), pose.translation.tolist()
    img = frame_depth.tolist()
    count = 0
    for P, tag in zip(pool.positions.tolist(), pool.tags.tolist()):
        u, v, z = project_oracle(K, R, t, P)
        if z <= 1e-6 or not (0 <= u <= K.width - 1 and 0 <= v <= K.height - 1):
            continue
        D = bilinear_oracle(img, u, v)
        if math.isfinite(D) and z > D + 3 * sigma_geo and tag == 0.0:
            count += 1
    return count


def pool_hygiene(cfg: RunConfig) -> tuple[bool, str]:
    from .scene_sim import render_depth

    res = _embodied(cfg)
    sizes = [r["pool_size"] for r in res.frames]
    K = cfg.camera.intrinsics()
    depth = render_depth(res.scene, K, res.poses[-1])
    stale = stale_occluded_oracle(res.pool, depth.depth, K, res.poses[-1], cfg.memory.sigma_geo)
    ok = stale == 0 and max(sizes) <= cfg.memory.max_pool
    return ok, f"stale occluded anchors {stale}; max pool size {max(sizes)} <= {cfg.memory.max_pool}"


def embodied_sanity(cfg: RunConfig, slack: float = 0.02) -> tuple[bool, str]:
    res = _embodied(cfg)
    series = [r["sc_iou"] for r in res.frames]
    worst = min(b - a for a, b in zip(series, series[1:])) if len(series) > 1 else 0.0
    ok = res.report.sc_iou >= 0.90 and res.report.miou >= 0.80 and worst >= -slack
    return ok, f"final sc {res.report.sc_iou:.4f} miou {res.report.miou:.4f}; worst frame-to-frame change {worst:+.4f}"


def schedule_contract() -> tuple[bool, str]:
    sched = TrainingSchedule()
    curve = train_fusion_toy(make_toy_dataset(n=64), "identity", sched, steps=2)
    first = curve.snapshots[0][ModuleGroup.SPATIAL]
    frozen = all(
        all(a.tobytes() == b.tobytes() for a, b in zip(first, snap[ModuleGroup.SPATIAL]))
        for snap in curve.snapshots[: sched.phase1_end + 1]
    )
    lrs = [lr_multiplier(g, 8, sched) for g in ("backbone", "spatial_expert", "temporal_manager")]
    ok = frozen and lrs == [0.0, 1e-5, 1e-4]
    return ok, f"spatial frozen through phase 1: {frozen}; epoch-8 lr {lrs}"


def _artifacts(out: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def _roundtrip(name: str, data: bytes) -> bool:
    if name.endswith(".svox"):
        return grid_to_bytes(grid_from_bytes(data)) == data
    if name.endswith(".gpool"):
        return pool_to_bytes(pool_from_bytes(data)) == data
    if name.endswith(".pgm"):
        return depth_to_pgm(depth_from_pgm(data)) == data
    if name.endswith(".csv"):
        return rows_to_csv(csv_to_rows(data.decode())) == data.decode()
    return True


def determinism(cfg: RunConfig) -> tuple[bool, str]:
    from .pipeline import run_local

    with tempfile.TemporaryDirectory() as tmp:
        outs = []
        for k in range(2):
            d = Path(tmp) / str(k)
            run_local(cfg, d / "local")
            run_embodied(cfg, d / "embodied")
            outs.append({f"{sub}/{n}": b for sub in ("local", "embodied") for n, b in _artifacts(d / sub).items()})
    same = outs[0].keys() == outs[1].keys() and all(outs[0][k] == outs[1][k] for k in outs[0])
    bad = [k for k, b in outs[0].items() if not _roundtrip(k, b)]
    return same and not bad, f"{len(outs[0])} artifacts byte-identical: {same}; round-trip failures: {bad or 'none'}"


CRITERIA = {
    1: ("equation_fidelity", 5, lambda c, w: equation_fidelity()),
    2: ("identity_cold_start", 30, lambda c, w: identity_cold_start()),
    3: ("gradient_checks", 30, lambda c, w: gradient_checks()),
    4: ("lift_mode_ordering", 120, lambda c, w: lift_ordering(c)),
    5: ("refine_mode_ordering", 180, lambda c, w: refine_ordering(c)),
    6: ("grm_mode_ordering", 120, lambda c, w: grm_ordering(w)),
    7: ("sigma_inverted_u", 180, lambda c, w: sigma_inverted_u(c)),
    8: ("pool_hygiene", 120, lambda c, w: pool_hygiene(c)),
    9: ("embodied_sanity", 180, lambda c, w: embodied_sanity(c)),
    10: ("schedule_contract", 1, lambda c, w: schedule_contract()),
    11: ("determinism_and_formats", 120, lambda c, w: determinism(c)),
}


def run_criterion(number: int, cfg: RunConfig | None = None, walls: RunConfig | None = None) -> CriterionResult:
    name, budget, fn = CRITERIA[number]
    cfg = cfg or load_config(None)
    walls = walls or load_config("bench_walls.json")
    t0 = time.perf_counter()
    ok, detail = fn(cfg, walls)
    dt = time.perf_counter() - t0
    if dt > budget:
        detail += f"; over the {budget}s budget"
    return CriterionResult(number, name, bool(ok) and dt <= budget, detail, dt, budget)


def run_acceptance(numbers=None, cfg: RunConfig | None = None, walls: RunConfig | None = None, echo=None) -> list[CriterionResult]:
    out = []
    for k in numbers or sorted(CRITERIA):
        r = run_criterion(k, cfg, walls)
        if echo:
            echo(r.line())
        out.append(r)
    return out
