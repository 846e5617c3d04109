"""Camera, projection, and bbox-propagation tests against hand oracles."""

import numpy as np
import pytest

from groundedflow.geometry import (
    BODY_OCCUPANCY,
    BBox,
    CameraIntrinsics,
    CameraPose,
    PlacementTrack,
    PointCloud,
    RootTrajectory,
    backproject_bbox_center,
    estimate_root_depth,
    look_at,
    project_point_cloud,
    project_points,
    propagate_and_project,
    static_bbox_track,
)


def _random_pose(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return CameraPose(q, rng.standard_normal(3))


def test_pose_transform_roundtrip():
    rng = np.random.Generator(np.random.PCG64(1))
    for _ in range(50):
        pose = _random_pose(rng)
        pts = rng.standard_normal((17, 3))
        back = pose.inverse_transform(pose.transform(pts))
        assert np.abs(back - pts).max() < 1e-12


def test_pose_compose_and_center():
    rng = np.random.Generator(np.random.PCG64(2))
    a, b = _random_pose(rng), _random_pose(rng)
    pts = rng.standard_normal((5, 3))
    chained = a.compose(b).transform(pts)
    assert np.abs(chained - a.transform(b.transform(pts))).max() < 1e-12
    center = a.camera_center()
    assert np.abs(a.transform(center)).max() < 1e-12


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        CameraPose(np.eye(3) * 2.0, np.zeros(3))
    flip = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        CameraPose(flip, np.zeros(3))


def test_look_at_points_camera_at_target():
    eye = np.array([3.0, -4.0, 1.7])
    target = np.array([0.0, 0.0, 0.9])
    pose = look_at(eye, target)
    cam = pose.transform(target)
    dist = np.linalg.norm(target - eye)
    # target lands on the optical axis at the right distance
    assert np.abs(cam[:2]).max() < 1e-12
    assert abs(cam[2] - dist) < 1e-12
    assert np.abs(pose.camera_center() - eye).max() < 1e-12
    # world-up projects upward in the image (negative v direction)
    up_cam = pose.rotation @ np.array([0.0, 0.0, 1.0])
    assert up_cam[1] < 0


def test_look_at_degenerate_inputs():
    with pytest.raises(ValueError):
        look_at((0, 0, 1), (0, 0, 1))
    with pytest.raises(ValueError):
        look_at((0, 0, 0), (0, 0, 5), up=(0, 0, 1))


def test_projection_matches_hand_formula():
    rng = np.random.Generator(np.random.PCG64(3))
    intr = CameraIntrinsics(f=100.0, cx=12.0, cy=11.0, width=24, height=24)
    for _ in range(100):
        pose = _random_pose(rng)
        p = rng.standard_normal(3) * 3.0
        u, v, z = project_points(pose.transform(p), intr)
        # scalar reimplementation, one coordinate at a time
        xc = float(pose.rotation[0] @ p + pose.translation[0])
        yc = float(pose.rotation[1] @ p + pose.translation[1])
        zc = float(pose.rotation[2] @ p + pose.translation[2])
        assert abs(u - (100.0 * xc / zc + 12.0)) < 1e-9
        assert abs(v - (100.0 * yc / zc + 11.0)) < 1e-9
        assert abs(z - zc) < 1e-12


def test_point_cloud_render_zbuffer_and_culling():
    intr = CameraIntrinsics(f=10.0, cx=4.0, cy=4.0, width=8, height=8)
    pose = CameraPose.identity()
    pts = np.array([
        [0.0, 0.0, 2.0],   # projects to the principal pixel
        [0.0, 0.0, 1.0],   # same pixel, nearer: must win
        [0.0, 0.0, -1.0],  # behind the camera: culled
        [10.0, 0.0, 1.0],  # off the image: culled
    ])
    colors = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0]], dtype=np.float64)
    frame = project_point_cloud(PointCloud(pts, colors), pose, intr, z_near=0.05)
    assert np.array_equal(frame.rgb[4, 4], [0, 1, 0])
    assert frame.coverage[4, 4]
    assert frame.coverage.sum() == 1
    assert frame.depth[4, 4] == np.clip(0.05 / 1.0, 0.0, 1.0)
    assert frame.depth[0, 0] == 0.0


def test_point_cloud_tie_breaks_to_lower_index():
    intr = CameraIntrinsics(f=10.0, cx=4.0, cy=4.0, width=8, height=8)
    pts = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 2.0]])
    colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    frame = project_point_cloud(PointCloud(pts, colors), CameraPose.identity(), intr)
    assert np.array_equal(frame.rgb[4, 4], [1, 0, 0])


def test_root_depth_frozen_value():
    intr = CameraIntrinsics(f=100.0, cx=12.0, cy=12.0, width=24, height=24)
    # f*H / (0.9*a0) = 100*1.8 / (0.9*40) = 5.0
    assert estimate_root_depth(1.8, 40.0, intr) == 5.0
    with pytest.raises(ValueError):
        estimate_root_depth(1.8, 0.0, intr)
    with pytest.raises(ValueError):
        estimate_root_depth(-1.0, 40.0, intr)


def test_backproject_reprojects_to_center():
    rng = np.random.Generator(np.random.PCG64(4))
    intr = CameraIntrinsics(f=80.0, cx=12.0, cy=12.0, width=24, height=24)
    for _ in range(100):
        u = float(rng.uniform(0, 24))
        v = float(rng.uniform(0, 24))
        z0 = float(rng.uniform(0.5, 9.0))
        box = BBox(0, 0, 0, 1, 1, u, v, 3.0)
        p = backproject_bbox_center(box, z0, intr)
        uu, vv, zz = project_points(p, intr)
        assert abs(uu - u) < 1e-9 and abs(vv - v) < 1e-9 and abs(zz - z0) < 1e-12


def test_bbox_center_scale_quantization():
    box = BBox.from_center_scale(0, u=11.2, v=9.8, a=5.0, grid_h=24, grid_w=24, patch=1)
    # outward rounding: [8.7, 13.7] -> x 8..14, [7.3, 12.3] -> y 7..13
    assert (box.x1, box.x2, box.y1, box.y2) == (8, 14, 7, 13)
    assert box.center_tokens() == (11.0, 10.0)
    tiny = BBox.from_center_scale(0, u=5.5, v=5.5, a=0.4, grid_h=24, grid_w=24, patch=1)
    assert tiny.width >= 1 and tiny.height >= 1
    assert BBox.from_center_scale(0, u=-30.0, v=5.0, a=2.0, grid_h=24, grid_w=24, patch=1) is None
    with pytest.raises(ValueError):
        BBox.from_center_scale(0, u=5.0, v=5.0, a=0.0, grid_h=24, grid_w=24, patch=1)


def test_bbox_from_corners_validation():
    box = BBox.from_corners(2, 1, 1, 5, 4, grid_h=24, grid_w=24, patch=1)
    assert (box.width, box.height) == (4, 3)
    assert box.center_tokens() == (3.0, 2.5)
    assert box.frame == 2
    for bad in [(5, 4, 1, 1), (-1, 0, 3, 3), (0, 0, 25, 3)]:
        with pytest.raises(ValueError):
            BBox.from_corners(0, *bad, grid_h=24, grid_w=24, patch=1)


def test_static_track_union():
    box = BBox.from_corners(0, 3, 4, 7, 9, grid_h=12, grid_w=12, patch=1)
    track = static_bbox_track(box, 5, grid_h=12, grid_w=12)
    assert len(track) == 5 and all(track.present())
    union = track.union_mask()
    assert union.sum() == box.width * box.height
    assert union[4:9, 3:7].all()


def test_trajectory_validation():
    with pytest.raises(ValueError):
        RootTrajectory(np.array([[0.1, 0.0, 0.0]]), body_height=1.8)
    with pytest.raises(ValueError):
        RootTrajectory(np.zeros((0, 3)), body_height=1.8)
    with pytest.raises(ValueError):
        RootTrajectory(np.zeros((3, 3)), body_height=0.0)


def test_propagation_matches_hand_formula():
    rng = np.random.Generator(np.random.PCG64(5))
    intr = CameraIntrinsics(f=60.0, cx=12.0, cy=12.0, width=24, height=24)
    for _ in range(100):
        frames = int(rng.integers(2, 6))
        poses = [_random_pose(rng) for _ in range(frames)]
        offsets = np.vstack([np.zeros(3), rng.standard_normal((frames - 1, 3)) * 0.4])
        height = float(rng.uniform(1.2, 2.0))
        traj = RootTrajectory(offsets, body_height=height)
        p0 = np.array([0.0, 0.0, float(rng.uniform(3.0, 8.0))])
        track = propagate_and_project(p0, traj, poses, intr)
        for t in range(frames):
            # scalar oracle: anchor -> world -> camera t -> pinhole
            root_anchor = p0 + offsets[t]
            world = poses[0].rotation.T @ (root_anchor - poses[0].translation)
            cam = poses[t].rotation @ world + poses[t].translation
            if cam[2] <= 0.05:
                assert track.boxes[t] is None
                continue
            u = 60.0 * cam[0] / cam[2] + 12.0
            v = 60.0 * cam[1] / cam[2] + 12.0
            a = 60.0 * height / (BODY_OCCUPANCY * cam[2])
            expect = BBox.from_center_scale(t, u, v, a, 24, 24, 1)
            got = track.boxes[t]
            if expect is None:
                assert got is None
                continue
            assert abs(got.u - u) < 1e-9 and abs(got.v - v) < 1e-9
            assert abs(got.a - a) < 1e-9
            assert (got.x1, got.y1, got.x2, got.y2) == \
                   (expect.x1, expect.y1, expect.x2, expect.y2)
            assert abs(track.depths[t] - cam[2]) < 1e-12


def test_scale_law_on_every_visible_frame():
    rng = np.random.Generator(np.random.PCG64(6))
    intr = CameraIntrinsics(f=60.0, cx=12.0, cy=12.0, width=24, height=24)
    checked = 0
    for _ in range(50):
        frames = int(rng.integers(2, 8))
        poses = [_random_pose(rng) for _ in range(frames)]
        offsets = np.vstack([np.zeros(3), rng.standard_normal((frames - 1, 3))])
        height = float(rng.uniform(1.2, 2.0))
        traj = RootTrajectory(offsets, body_height=height)
        track = propagate_and_project(np.array([0.0, 0.0, 5.0]), traj, poses, intr)
        const = intr.f * height / BODY_OCCUPANCY
        for box, depth in zip(track.boxes, track.depths):
            if box is None:
                continue
            # a_t is constructed as const / Z_t; both identities must hold
            assert box.a == const / depth
            assert abs(box.a * depth - const) <= 1e-9 * const
            checked += 1
    assert checked > 50


def test_propagation_length_mismatch():
    intr = CameraIntrinsics(f=60.0, cx=12.0, cy=12.0, width=24, height=24)
    traj = RootTrajectory(np.zeros((3, 3)), body_height=1.8)
    with pytest.raises(ValueError):
        propagate_and_project(np.zeros(3), traj, [CameraPose.identity()] * 2, intr)
