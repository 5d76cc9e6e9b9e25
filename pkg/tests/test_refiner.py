import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgrocc.errors import DegenerateRay, NonUnitNormal, ResidualTooLarge
from sgrocc.geometry import CameraIntrinsics, Pose, backproject_pixels, look_at
from sgrocc.lifter import GateParams, LiftMode, SampleConfig, lift_many
from sgrocc.refiner import (
    DELTA_MAX,
    GrmStrategy,
    build_adjacency,
    default_kappa,
    fit_free_residuals,
    fit_ray_residuals,
    grm_descent,
    grm_loss,
    grm_weight,
    predict_depth_residual,
    refine_anchor_free,
    refine_anchor_ray,
    refine_rays,
    snap_residuals,
    surface_depth,
)
from sgrocc.scene_sim import DepthFrame, RoomSpec, SemanticClass, build_scene, feature_map, perturb_pose, render_depth

vec = st.tuples(*[st.floats(-5, 5, allow_nan=False)] * 3)


def wall_frame(dist=2.0, n=21):
    d = np.full((n, n), dist)
    return DepthFrame(d, np.zeros((n, n, 3)), np.full((n, n), int(SemanticClass.WALL)))


def test_ray_refine_examples():
    np.testing.assert_allclose(refine_anchor_ray((0, 0, 2), (0, 0, 0), 0.5), (0, 0, 2.5))
    np.testing.assert_array_equal(refine_anchor_ray((1, 2, 3), (0, 0, 0), 0.0), (1, 2, 3))
    np.testing.assert_allclose(refine_anchor_ray((2, 2, 2), (0, 0, 0), math.sqrt(3)), (3, 3, 3), atol=1e-15)
    with pytest.raises(DegenerateRay):
        refine_anchor_ray((1, 1, 1), (1, 1, 1), 0.1)
    with pytest.raises(ResidualTooLarge):
        refine_anchor_ray((0, 0, 1), (0, 0, 0), -1.0)


def test_free_refine_examples():
    np.testing.assert_array_equal(refine_anchor_free((1, 2, 3), (0, 0, 0)), (1, 2, 3))
    np.testing.assert_allclose(refine_anchor_free((1, 2, 3), (0.1, 0, 0)), (1.1, 2, 3))
    with pytest.raises(ResidualTooLarge):
        refine_anchor_free((0, 0, 0), (0.3, 0, 0))


@given(vec, vec, st.floats(-0.99, 0.99))
def test_ray_containment_and_range_additivity(P, O, frac):
    P, O = np.array(P), np.array(O)
    rng = np.linalg.norm(P - O)
    if rng < 1e-3:
        return
    dd = frac * rng
    R = refine_anchor_ray(P, O, dd)
    direction = (P - O) / rng
    assert np.linalg.norm(np.cross(R - O, direction)) <= 1e-9 * max(1.0, rng)
    assert abs(np.linalg.norm(R - O) - (rng + dd)) <= 1e-9 * max(1.0, rng)
    pts = [refine_anchor_ray(P, O, s * min(rng / 2, 0.1)) for s in (-1, 0, 1)]
    assert np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0])) <= 1e-9 * max(1.0, rng)


def test_predict_depth_residual_examples():
    K = CameraIntrinsics(20.0, 20.0, 10.0, 10.0, 21, 21)
    pose = Pose.identity()
    f = wall_frame(2.0)
    assert predict_depth_residual((0, 0, 2.0), f, K, pose) == pytest.approx(0.0, abs=1e-12)
    assert predict_depth_residual((0, 0, 1.9), f, K, pose) == pytest.approx(0.1, abs=1e-12)
    assert predict_depth_residual((0, 0, 1.0), f, K, pose) == DELTA_MAX


def test_snap_lands_on_wall_off_axis():
    K = CameraIntrinsics(20.0, 20.0, 10.0, 10.0, 21, 21)
    pose = Pose.identity()
    P = np.array([[0.3, -0.2, 1.85], [-0.4, 0.1, 2.1]])
    R = refine_rays(P, pose.center, snap_residuals(P, wall_frame(2.0), K, pose))
    np.testing.assert_allclose(R[:, 2], 2.0, atol=1e-12)


def test_surface_depth_avoids_edge_blends():
    d = np.full((4, 4), 3.0)
    d[:, :2] = 1.0
    # halfway between a 1 m and a 3 m pixel the bilinear blend is 2 m
    assert surface_depth(d, np.array([1.5]), np.array([1.0]), np.array([1.1]))[0] == 1.0
    assert surface_depth(d, np.array([1.5]), np.array([1.0]), np.array([2.8]))[0] == 3.0
    assert surface_depth(d, np.array([2.5]), np.array([1.0]), np.array([2.0]))[0] == 3.0


def test_grm_loss_examples():
    s = GrmStrategy("uniform", 1.0)
    n = np.array([[0, 0, 1.0], [0, 0, 1.0]])
    loss, _ = grm_loss([[0, 0, 0.1], [0, 0, 0]], [3, 3], n, [[0, 1]], s)
    assert loss == pytest.approx(0.01, abs=1e-15)
    loss, g = grm_loss([[0, 0, 0], [0.5, 0.3, 0]], [3, 3], n, [[0, 1]], s)
    assert loss == 0.0
    loss, g = grm_loss([[0, 0, 0.1], [0, 0, 0]], [3, 3], n, [[0, 1]], GrmStrategy("none"))
    assert loss == 0.0 and not g.any()
    with pytest.raises(NonUnitNormal):
        grm_loss([[0, 0, 0], [0, 0, 1]], [3, 3], [[0, 0, 2.0], [0, 0, 1]], [[0, 1]], s)


def test_grm_weight_lookup():
    sa = GrmStrategy("semantic_adaptive")
    assert grm_weight(SemanticClass.WALL, sa) == 1.0
    assert grm_weight(SemanticClass.CHAIR, sa) == 0.1
    assert grm_weight(SemanticClass.CHAIR, GrmStrategy("none")) == 0.0
    assert grm_weight(SemanticClass.BED, GrmStrategy("uniform", 0.5)) == 0.5
    assert set(default_kappa()) == set(range(1, 12))


def test_kappa_ratio_wall_vs_chair():
    n = np.tile([0.0, 0.0, 1.0], (4, 1))
    P = np.array([[0, 0, 0.1], [0, 0, 0], [5, 0, 0.1], [5, 0, 0]])
    pairs = np.array([[0, 1], [2, 3]])
    s = GrmStrategy("semantic_adaptive")
    wall, _ = grm_loss(P[:2], [3, 3], n[:2], [[0, 1]], s)
    chair, _ = grm_loss(P[2:], [5, 5], n[2:], [[0, 1]], s)
    both, _ = grm_loss(P, [3, 3, 5, 5], n, pairs, s)
    assert wall == 10 * chair
    assert both == pytest.approx(wall + chair, rel=1e-15)


def test_grm_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    s = GrmStrategy("semantic_adaptive")
    for _ in range(50):
        P = rng.normal(0, 0.5, (6, 3))
        n = rng.normal(size=(6, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        labels = rng.integers(1, 12, 6)
        pairs = np.array([[0, 1], [1, 2], [3, 4], [2, 5]])
        _, g = grm_loss(P, labels, n, pairs, s)
        num = np.zeros_like(P)
        for i in range(6):
            for c in range(3):
                Pp, Pm = P.copy(), P.copy()
                Pp[i, c] += 1e-5
                Pm[i, c] -= 1e-5
                num[i, c] = (grm_loss(Pp, labels, n, pairs, s)[0] - grm_loss(Pm, labels, n, pairs, s)[0]) / 2e-5
        assert np.max(np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-3)) <= 1e-5


def test_grm_descent_flattens_noisy_wall():
    rng = np.random.default_rng(0)
    xs, ys = np.meshgrid(np.arange(10) * 0.08, np.arange(10) * 0.08)
    P = np.stack([xs.ravel(), ys.ravel(), rng.normal(0, 0.02, 100)], axis=1)
    labels = np.full(100, int(SemanticClass.WALL))
    normals = np.tile([0.0, 0.0, 1.0], (100, 1))
    pairs = build_adjacency(P, labels, 0.16)
    out, losses = grm_descent(P, labels, normals, pairs, GrmStrategy("semantic_adaptive"), lr=1e-2, steps=500)
    active = losses[losses > 1e-30]
    assert np.all(np.diff(active) < 0)
    gap = np.abs(np.einsum("mc,mc->m", normals[pairs[:, 0]], out[pairs[:, 0]] - out[pairs[:, 1]]))
    assert gap.max() < 1e-3


def test_adjacency_is_same_class_nearest_and_deduplicated():
    P = np.array([[0, 0, 0], [0.1, 0, 0], [0.15, 0, 0], [1.0, 0, 0]])
    pairs = build_adjacency(P, np.array([3, 3, 5, 3]), 0.16)
    np.testing.assert_array_equal(pairs, [[0, 1]])
    assert np.all(pairs[:, 0] < pairs[:, 1])


@pytest.mark.xfail(strict=True, reason="free and ray fits tie on planar walls (free RMS 0.0069 vs ray 0.0070 over 5 seeds)")
def test_rms_free_vs_ray_ordering_under_pose_noise():
    # both fits land on a planar wall, so unconstrained offsets lose nothing here
    scene = build_scene(0, RoomSpec(n_objects=0))
    K = CameraIntrinsics(100.0, 100.0, 63.5, 47.5, 128, 96)
    pose = look_at((2.4, 2.4, 1.4), (2.4, 4.8, 1.4))
    frame = render_depth(scene, K, pose)
    vv, uu = np.mgrid[0:96:4, 0:128:4]
    wall = frame.semantics[vv, uu].ravel() == SemanticClass.WALL
    free_err = ray_err = 0.0
    for seed in range(5):
        noisy = perturb_pose(pose, 0.05, seed)
        P = backproject_pixels(K, noisy, uu.astype(float), vv.astype(float), frame.depth[vv, uu]).reshape(-1, 3)
        res = lift_many(P, feature_map(frame, K), frame, K, pose, GateParams(), LiftMode(), SampleConfig())
        ray = refine_rays(P, pose.center, fit_ray_residuals(P, res, K, pose))
        free = P + fit_free_residuals(P, res, K, pose)
        ray_err += np.mean((ray[wall, 1] - 4.76) ** 2)
        free_err += np.mean((free[wall, 1] - 4.76) ** 2)
    assert free_err > ray_err
