import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgrocc.errors import InvalidSpec, SpecMismatch
from sgrocc.geometry import VoxelGridSpec
from sgrocc.memory import GaussianPool
from sgrocc.metrics import (
    SemanticVoxelGrid,
    boundary_f1,
    boundary_voxels,
    decode_arrays,
    decode_bruteforce,
    decode_pool,
    evaluate,
    miou,
    per_class_iou,
    sc_iou,
)
from sgrocc.scene_sim import N_CLASSES, SemanticClass

WALL = int(SemanticClass.WALL)
grids4 = arrays(np.uint8, (4, 4, 4), elements=st.integers(0, 11))


def test_decode_empty_pool_is_empty():
    spec = VoxelGridSpec(dims=(4, 4, 4))
    assert not decode_pool(GaussianPool(), spec).occupied.any()


def test_decode_single_primitive_at_voxel_center():
    spec = VoxelGridSpec(dims=(5, 5, 5), resolution=0.08)
    logits = np.zeros((1, N_CLASSES))
    logits[0, WALL] = 60.0
    _, lab = decode_arrays([[0.2, 0.2, 0.2]], [0.08], logits, spec)
    lab = lab.reshape(5, 5, 5)
    assert lab[2, 2, 2] == WALL
    # face neighbours get exp(-1/2) = 0.61 >= 0.25, edge diagonals exp(-1) = 0.37, corners exp(-1.5) = 0.22
    assert lab[1, 2, 2] == WALL and lab[1, 1, 2] == WALL and lab[1, 1, 1] == 0


def test_decode_matches_bruteforce_bitwise():
    rng = np.random.default_rng(3)
    spec = VoxelGridSpec(dims=(16, 16, 16), resolution=0.08)
    P = rng.uniform(-0.1, 1.38, (100, 3))
    S = rng.uniform(0.02, 0.15, 100)
    L = rng.normal(0, 3, (100, N_CLASSES))
    acc, lab = decode_arrays(P, S, L, spec)
    acc_b, lab_b = decode_bruteforce(P, S, L, spec)
    assert acc.tobytes() == acc_b.tobytes()
    np.testing.assert_array_equal(lab, lab_b)
    assert lab.any()


@settings(max_examples=25)
@given(st.integers(-8, 8), st.integers(-8, 8), st.integers(-8, 8), st.integers(0, 2**31))
def test_decode_shift_equivariance(i, j, k, seed):
    rng = np.random.default_rng(seed)
    res = 0.125
    spec = VoxelGridSpec(dims=(8, 8, 8), resolution=res)
    P = np.round(rng.uniform(0, 1, (20, 3)) * 1024) / 1024
    S = rng.choice([0.125, 0.25], 20)
    L = rng.normal(0, 2, (20, N_CLASSES))
    shift = np.array([i, j, k]) * res
    moved = VoxelGridSpec(origin=tuple(shift), dims=(8, 8, 8), resolution=res)
    np.testing.assert_array_equal(decode_arrays(P, S, L, spec)[1], decode_arrays(P + shift, S, L, moved)[1])


def test_grid_validation():
    spec = VoxelGridSpec(dims=(2, 2, 2))
    with pytest.raises(InvalidSpec):
        SemanticVoxelGrid(spec, np.zeros(7))
    with pytest.raises(InvalidSpec):
        SemanticVoxelGrid(spec, np.full(8, 12))
    with pytest.raises(SpecMismatch):
        sc_iou(SemanticVoxelGrid(spec, np.zeros(8)), SemanticVoxelGrid(VoxelGridSpec(dims=(1, 2, 4)), np.zeros(8)))


def test_sc_iou_examples():
    a = np.zeros(10, np.uint8)
    b = a.copy()
    assert sc_iou(a, b) == 1.0
    a[:2] = WALL
    b[1:3] = 5
    assert sc_iou(a, b) == pytest.approx(1 / 3)
    assert sc_iou(a, a) == 1.0
    c = np.zeros(10, np.uint8)
    c[5:] = 1
    assert sc_iou(a, c) == 0.0


def test_miou_examples():
    g = np.zeros((4, 4, 4), np.uint8)
    g[0], g[1], g[2, :2] = 1, 3, 7
    m, ious = miou(g, g)
    assert m == 1.0
    assert np.isnan(ious).sum() == 8
    assert np.nansum(ious) == 3


def test_miou_hand_counts():
    gt = np.zeros((4, 4, 4), np.uint8)
    pred = np.zeros((4, 4, 4), np.uint8)
    gt[0, 0, :] = 3  # 4 wall voxels
    pred[0, 0, :3] = 3  # 3 TP
    pred[0, 1, 0] = 3  # 1 FP
    gt[2, 2, :2] = 5  # 2 chair voxels
    pred[2, 2, 0] = 5  # 1 TP
    pred[2, 2, 1] = 6  # 1 FN for chair, 1 FP for class 6
    ious = per_class_iou(pred, gt)
    assert ious[3 - 1] == 3 / 5
    assert ious[5 - 1] == 1 / 2
    assert ious[6 - 1] == 0.0
    m, _ = miou(pred, gt)
    assert m == pytest.approx((3 / 5 + 1 / 2 + 0.0) / 3)


def test_sc_iou_one_does_not_imply_miou_one():
    pred = np.full((4, 4, 4), WALL, np.uint8)
    gt = np.full((4, 4, 4), 5, np.uint8)
    assert sc_iou(pred, gt) == 1.0
    assert miou(pred, gt)[0] == 0.0


def slab(offset, n=12):
    g = np.zeros((n, n, n), np.uint8)
    g[:, :, offset] = WALL
    return g


def test_boundary_examples():
    assert boundary_f1(slab(4), slab(4)) == 1.0
    assert boundary_f1(slab(4), slab(5)) == 1.0
    assert boundary_f1(slab(1), slab(4)) == 0.0
    empty = np.zeros((4, 4, 4), np.uint8)
    assert boundary_f1(empty, empty) == 1.0
    assert boundary_f1(empty, slab(0, 4)) == 0.0


def test_boundary_voxels_bruteforce():
    rng = np.random.default_rng(1)
    occ = rng.random((6, 6, 6)) < 0.5
    pad = np.pad(occ, 1)
    ref = np.zeros_like(occ)
    for x, y, z in zip(*np.nonzero(occ)):
        nb = [pad[x + 1 + dx, y + 1 + dy, z + 1 + dz] for dx, dy, dz in
              [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]]
        ref[x, y, z] = not all(nb)
    np.testing.assert_array_equal(boundary_voxels(occ), ref)


@given(grids4, grids4)
def test_metric_symmetry_and_ranges(a, b):
    assert sc_iou(a, b) == sc_iou(b, a)
    assert boundary_f1(a, b) == boundary_f1(b, a)
    m, _ = miou(a, b)
    assert math.isnan(m) or 0.0 <= m <= 1.0
    rep = evaluate(a, b)
    assert 0.0 <= rep.sc_iou <= 1.0 and 0.0 <= rep.boundary_f1 <= 1.0
    assert set(rep.row()) >= {"sc_iou", "miou", "boundary_f1", "iou_wall"}


def test_mask_restricts_evaluation():
    a = np.zeros(6, np.uint8)
    b = a.copy()
    a[0] = WALL
    mask = np.array([False, True, True, True, True, True])
    assert sc_iou(a, b) == 0.0
    assert sc_iou(a, b, mask) == 1.0
