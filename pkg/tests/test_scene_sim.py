import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgrocc.errors import CameraOutsideScene, FracOutOfRange, GridOutsideScene, InvalidSpec, PathLeavesBounds
from sgrocc.geometry import CameraIntrinsics, Pose, VoxelGridSpec, backproject_pixels, look_at, pixel_rays
from sgrocc.scene_sim import (
    STRUCTURAL,
    RoomSpec,
    SceneModel,
    SemanticClass,
    Solid,
    TrajectorySpec,
    build_scene,
    feature_map,
    gen_trajectory,
    gt_occupancy,
    label_points,
    perturb_pose,
    render_depth,
)

K = CameraIntrinsics(60.0, 60.0, 32.0, 24.0, 65, 49)


def test_class_codes():
    assert len(SemanticClass) == 12
    assert SemanticClass.EMPTY == 0
    assert [c.value for c in SemanticClass] == list(range(12))


def test_empty_room_has_six_structural_solids():
    scene = build_scene(0, RoomSpec(size=(4.0, 4.0, 2.4), n_objects=0))
    assert len(scene.solids) == 6
    assert all(s.label in STRUCTURAL for s in scene.solids)


def test_build_is_deterministic():
    a = build_scene(0, RoomSpec(n_objects=6))
    b = build_scene(0, RoomSpec(n_objects=6))
    assert a.to_bytes() == b.to_bytes()


def test_object_count():
    scene = build_scene(0, RoomSpec(n_objects=3))
    assert len(scene.solids) == 9
    assert all(s.label not in (SemanticClass.WALL, SemanticClass.EMPTY) for s in scene.solids[6:])


def test_room_too_small():
    with pytest.raises(InvalidSpec):
        RoomSpec(size=(0.5, 4.0, 2.4))


def test_head_on_wall_depth_and_normal():
    scene = build_scene(0, RoomSpec(n_objects=0))
    # the x=0 wall's inner face is at x=0.04
    pose = look_at((1.04, 2.4, 1.4), (0.0, 2.4, 1.4))
    frame = render_depth(scene, K, pose)
    assert frame.depth[24, 32] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(frame.normals[24, 32], (1.0, 0.0, 0.0))
    assert frame.semantics[24, 32] == SemanticClass.WALL


def test_no_solid_gives_infinite_depth():
    floor = Solid("slab", int(SemanticClass.FLOOR), (-1.0, -1.0, -0.04), (5.0, 5.0, 0.04))
    scene = SceneModel((floor,), ((-1.0, -1.0, -0.04), (5.0, 5.0, 3.0)))
    frame = render_depth(scene, K, look_at((2, 2, 1), (2, 2.1, 2.5)))
    assert np.all(np.isinf(frame.depth))
    assert np.all(frame.semantics == SemanticClass.EMPTY)


def test_zero_noise_matches_noiseless():
    scene = build_scene(0, RoomSpec(n_objects=6))
    pose = look_at((2.4, 1.4, 1.4), (2.4, 3.0, 0.6))
    a = render_depth(scene, K, pose)
    b = render_depth(scene, K, pose, {"sigma_d": 0.0, "seed": 3})
    assert a.depth.tobytes() == b.depth.tobytes()
    c = render_depth(scene, K, pose, {"sigma_d": 0.05, "seed": 3})
    assert np.all(c.depth[np.isfinite(c.depth)] > 0)
    assert c.depth.tobytes() != a.depth.tobytes()


def test_camera_outside():
    scene = build_scene(0, RoomSpec(n_objects=0))
    with pytest.raises(CameraOutsideScene):
        render_depth(scene, K, look_at((10, 2, 1), (2, 2, 1)))


@given(st.integers(0, 1000), st.floats(0, 6.28))
def test_depth_and_normal_oracles(seed, angle):
    scene = build_scene(seed % 7, RoomSpec(n_objects=6))
    eye = np.array([2.4 + np.cos(angle), 2.4 + np.sin(angle), 1.4])
    pose = look_at(eye, (2.4, 2.4, 0.6))
    frame = render_depth(scene, K, pose)
    vv, uu = np.mgrid[0 : K.height, 0 : K.width].astype(float)
    fin = np.isfinite(frame.depth)
    pts = backproject_pixels(K, pose, uu[fin], vv[fin], frame.depth[fin])
    assert np.max(scene.distance_to_surface(pts)) <= 1e-6
    rays = pixel_rays(K, pose, uu, vv)[fin]
    assert np.all(np.einsum("nc,nc->n", frame.normals[fin], rays) < 0)
    np.testing.assert_allclose(np.linalg.norm(frame.normals[fin], axis=1), 1.0, atol=1e-6)


def test_gt_occupancy_basic_labels():
    scene = build_scene(0, RoomSpec(n_objects=0))
    grid = VoxelGridSpec((0, 0, 0), (60, 60, 36), 0.08)
    gt = gt_occupancy(scene, grid)
    assert gt[30, 30, 0] == SemanticClass.FLOOR
    assert gt[30, 30, 15] == SemanticClass.EMPTY
    assert gt.tobytes() == gt_occupancy(scene, grid).tobytes()
    with pytest.raises(GridOutsideScene):
        gt_occupancy(scene, VoxelGridSpec((-1, 0, 0), (4, 4, 4), 0.08))


def test_gt_occupancy_matches_supersampling():
    scene = build_scene(0, RoomSpec(n_objects=6))
    agree = total = 0
    for origin in [(0.0, 0.0, 0.0), (1.2, 0.4, 0.0), (3.6, 3.6, 2.24), (0.4, 2.0, 0.8)]:
        grid = VoxelGridSpec(origin, (8, 8, 8), 0.08)
        gt = gt_occupancy(scene, grid).ravel()
        centers = grid.centers().reshape(-1, 3)
        offs = (np.stack(np.meshgrid(*[[-1, 0, 1]] * 3, indexing="ij"), -1).reshape(-1, 3)) * 0.08 / 3
        samples = label_points(scene, (centers[:, None, :] + offs[None]).reshape(-1, 3)).reshape(len(centers), 27)
        vote = np.array([np.bincount(s, minlength=12).argmax() for s in samples])
        agree += int(np.sum(vote == gt))
        total += len(gt)
    assert agree / total >= 0.95


def test_empty_room_shell_fraction():
    spec = RoomSpec(n_objects=0)
    scene = build_scene(0, spec)
    # one voxel per slab thickness: centres on the slab mid-planes
    grid = VoxelGridSpec((-0.04, -0.04, -0.04), (61, 61, 37), 0.08)
    occ = gt_occupancy(scene, grid) != 0
    outer = np.prod(np.array(spec.size) + 0.08)
    inner = np.prod(np.array(spec.size) - 0.08)
    analytic = 1.0 - inner / outer
    assert occ.mean() == pytest.approx(analytic, rel=0.02)


def test_trajectory_examples():
    scene = build_scene(0, RoomSpec(n_objects=6))
    one = gen_trajectory(scene, TrajectorySpec(n_frames=1))
    assert len(one) == 1
    np.testing.assert_allclose(one[0].center, (3.4, 2.4, 1.4), atol=1e-12)
    loop = gen_trajectory(scene, TrajectorySpec(n_frames=30, radius=1.0))
    assert len(loop) == 30
    centers = np.array([p.center for p in loop])
    steps = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    assert np.all(steps <= 0.3)
    assert np.linalg.norm(centers[0] - centers[-1]) <= steps.max() + 1e-12
    still = gen_trajectory(scene, TrajectorySpec(n_frames=5, radius=0.0))
    assert all(np.allclose(p.center, still[0].center, atol=1e-12) for p in still)


def test_trajectory_leaving_bounds():
    scene = build_scene(0, RoomSpec(n_objects=0))
    with pytest.raises(PathLeavesBounds):
        gen_trajectory(scene, TrajectorySpec(n_frames=30, radius=3.0))


def test_perturb_pose_contract():
    pose = look_at((3.4, 2.4, 1.4), (2.4, 2.4, 0.6))
    assert perturb_pose(pose, 0.0, 1) == pose
    a = perturb_pose(pose, 0.05, 7)
    assert a == perturb_pose(pose, 0.05, 7)
    assert np.max(np.abs(a.translation - pose.translation)) <= 0.05 * np.linalg.norm(pose.translation)
    np.testing.assert_array_equal(a.rotation, pose.rotation)
    with pytest.raises(FracOutOfRange):
        perturb_pose(pose, 0.3, 0)


def test_feature_map_channels():
    scene = build_scene(0, RoomSpec(n_objects=6))
    frame = render_depth(scene, K, look_at((3.4, 2.4, 1.4), (2.4, 2.4, 0.6)))
    feat = feature_map(frame, K)
    assert feat.shape == (K.height, K.width, 15)
    np.testing.assert_array_equal(feat[..., :12].sum(axis=-1), 1.0)
    np.testing.assert_array_equal(np.argmax(feat[..., :12], axis=-1), frame.semantics)
