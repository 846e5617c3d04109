"""Synthetic world generator: determinism, sprite kinematics, compositing."""

import numpy as np
import pytest

from groundedflow.world import (
    BASE_JOINTS,
    HEAT_GROUPS,
    MIRROR_PAIRS,
    MOTION_KINDS,
    PATH_KINDS,
    SpriteSpec,
    WorldSpec,
    _area_weights,
    camera_path,
    composite_sprite,
    generate_world,
    identity_colors,
    load_world,
    make_scene,
    motion_maps,
    render_sprite,
    root_offset,
    save_world,
    sprite_joints,
)

TINY = WorldSpec(scene_seed=1, point_count=2000, pillar_count=2,
                 path_kind="orbit", frames=4,
                 sprite=SpriteSpec(identity_seed=2, motion="walk"))


def test_generation_is_bit_identical():
    a = generate_world(TINY)
    b = generate_world(TINY)
    assert np.array_equal(a.gt, b.gt)
    assert np.array_equal(a.env_stack(), b.env_stack())
    assert np.array_equal(a.motion.maps, b.motion.maps)
    assert np.array_equal(a.motion.root_offsets, b.motion.root_offsets)
    assert np.array_equal(a.identity, b.identity)
    for ba, bb in zip(a.track.boxes, b.track.boxes):
        assert (ba.x1, ba.y1, ba.x2, ba.y2) == (bb.x1, bb.y1, bb.x2, bb.y2)
    assert a.track.depths == b.track.depths


def test_empty_world_ground_truth_is_the_environment():
    spec = WorldSpec(scene_seed=3, point_count=2000, pillar_count=1,
                     path_kind="dolly", frames=3, sprite=None)
    bundle = generate_world(spec)
    assert np.array_equal(bundle.gt, bundle.env_stack())
    assert all(b is None for b in bundle.track.boxes)
    assert np.count_nonzero(bundle.motion.maps) == 0


def test_sprite_stays_inside_its_box():
    """Compositing only touches the box rectangle, pixel for pixel."""
    bundle = generate_world(TINY)
    env = bundle.env_stack()
    for t, box in enumerate(bundle.track.boxes):
        outside = np.ones(bundle.gt.shape[1:3], dtype=bool)
        outside[box.y1:box.y2, box.x1:box.x2] = False
        assert np.array_equal(bundle.gt[t][outside], env[t][outside])
        changed = ~np.isclose(bundle.gt[t], env[t]).all(axis=-1)
        assert changed.any()
        assert not changed[outside].any()


def test_sprite_centroid_lands_on_the_mapped_canonical_centroid():
    """The box-filter paste keeps the sprite mass where the box says."""
    bundle = generate_world(TINY)
    spec = bundle.spec
    colors = {k: np.ones(3) for k in ("skin", "shirt", "pants")}
    for t, box in enumerate(bundle.track.boxes):
        joints = sprite_joints("walk", 2 * np.pi * t / (spec.frames - 1),
                               TINY.sprite.amplitude)
        _, alpha = render_sprite(joints, colors, spec.canon_h, spec.canon_w)
        ys, xs = np.meshgrid(np.arange(spec.canon_h) + 0.5,
                             np.arange(spec.canon_w) + 0.5, indexing="ij")
        cin_x = float((alpha * xs).sum() / alpha.sum()) / spec.canon_w
        cin_y = float((alpha * ys).sum() / alpha.sum()) / spec.canon_h

        diff = np.abs(bundle.gt[t, ..., :3] - bundle.env_stack()[t, ..., :3]).sum(-1)
        py, px = np.meshgrid(np.arange(spec.grid_h) + 0.5,
                             np.arange(spec.grid_w) + 0.5, indexing="ij")
        cx = float((diff * px).sum() / diff.sum())
        cy = float((diff * py).sum() / diff.sum())

        exp_x = box.x1 + cin_x * (box.x2 - box.x1)
        exp_y = box.y1 + cin_y * (box.y2 - box.y1)
        # the rgb difference is not exactly alpha (occlusion-free blend),
        # so allow a pixel of drift on a ~10 pixel box
        assert abs(cx - exp_x) < 1.0
        assert abs(cy - exp_y) < 1.0


def test_mirror_pairs_move_in_opposite_phase():
    """Left offsets equal the right offsets half a cycle later, x-negated."""
    for motion in MOTION_KINDS:
        for phase in (0.0, 0.7, 1.9, 4.4):
            now = sprite_joints(motion, phase)
            later = sprite_joints(motion, phase + np.pi)
            for left, right in MIRROR_PAIRS:
                off_l = now[left] - np.asarray(BASE_JOINTS[left])
                off_r = later[right] - np.asarray(BASE_JOINTS[right])
                # recovering offsets by subtraction reintroduces rounding,
                # so exactness holds only to the last couple of bits
                assert np.abs(off_l - [-off_r[0], off_r[1]]).max() < 1e-15


def test_zero_amplitude_freezes_the_skeleton():
    frozen = sprite_joints("bounce", 2.3, amplitude=0.0)
    for name, pos in BASE_JOINTS.items():
        assert np.array_equal(frozen[name], np.asarray(pos, dtype=np.float64))
    with pytest.raises(ValueError):
        SpriteSpec(amplitude=2.5)
    with pytest.raises(ValueError):
        SpriteSpec(motion="moonwalk")
    with pytest.raises(ValueError):
        SpriteSpec(joint_count=5)
    with pytest.raises(ValueError):
        SpriteSpec(height=0.0)


def test_root_offsets():
    assert np.array_equal(root_offset("walk", 0, 8), np.zeros(3))
    assert np.array_equal(root_offset("wave", 5, 8), np.zeros(3))
    assert np.array_equal(root_offset("bounce", 3, 1), np.zeros(3))
    xs = [root_offset("walk", t, 8)[0] for t in range(8)]
    assert all(b > a for a, b in zip(xs, xs[1:]))
    assert root_offset("bounce", 2, 8)[1] <= 0.0  # bounce lifts, -y is up


def test_camera_paths():
    frames = 6
    for kind in PATH_KINDS:
        poses = camera_path(kind, frames, seed=4)
        assert len(poses) == frames

    loop = camera_path("loop_and_revisit", frames, seed=4)
    assert np.abs(loop[-1].rotation - loop[0].rotation).max() < 1e-6
    assert np.abs(loop[-1].translation - loop[0].translation).max() < 1e-6

    orbit = camera_path("orbit", frames, seed=4)
    c0 = orbit[0].camera_center()[:2]
    c1 = orbit[-1].camera_center()[:2]
    cosang = np.dot(c0, c1) / (np.linalg.norm(c0) * np.linalg.norm(c1))
    assert abs(np.degrees(np.arccos(cosang)) - 110.0) < 1e-6

    with pytest.raises(ValueError):
        camera_path("spiral", frames, seed=4)
    with pytest.raises(ValueError):
        camera_path("orbit", 0, seed=4)


def test_environment_render_invariants():
    bundle = generate_world(TINY)
    for frame in bundle.env:
        frame.validate()
        assert frame.depth.min() >= 0.0 and frame.depth.max() <= 1.0
        assert frame.coverage.mean() > 0.3  # ground plane fills the view


def test_motion_map_channels_peak_at_their_joints():
    joints = sprite_joints("wave", 1.1)
    h_c = w_c = 12
    maps = motion_maps(joints, h_c, w_c)
    assert maps.shape == (h_c, w_c, 4)
    assert maps.min() >= 0.0 and maps.max() <= 1.0
    for ch, names in HEAT_GROUPS.items():
        peak = np.unravel_index(np.argmax(maps[..., ch]), (h_c, w_c))
        dists = [np.hypot(peak[1] + 0.5 - joints[n][0] * w_c,
                          peak[0] + 0.5 - joints[n][1] * h_c) for n in names]
        assert min(dists) < 1.5
    # silhouette covers every joint location
    for name in BASE_JOINTS:
        jx, jy = joints[name]
        assert maps[int(jy * h_c), int(jx * w_c), 3] > 0.5


def test_area_weights():
    for n_out, n_in in ((12, 12), (5, 12), (12, 5), (7, 3)):
        w = _area_weights(n_out, n_in)
        assert w.shape == (n_out, n_in)
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-12
    assert np.array_equal(_area_weights(6, 6), np.eye(6))


def test_identity_frames_distinguish_identities():
    a = generate_world(TINY)
    spec_b = WorldSpec(scene_seed=1, point_count=2000, pillar_count=2,
                       path_kind="orbit", frames=4,
                       sprite=SpriteSpec(identity_seed=9, motion="walk"))
    b = generate_world(spec_b)
    assert a.identity.shape == (2, TINY.grid_h, TINY.grid_w, 3)
    assert not np.array_equal(a.identity, b.identity)
    # same track: identity change must not disturb placement
    for ba, bb in zip(a.track.boxes, b.track.boxes):
        assert (ba.x1, ba.y1, ba.x2, ba.y2) == (bb.x1, bb.y1, bb.x2, bb.y2)
    ca = identity_colors(2)
    cb = identity_colors(9)
    assert not np.array_equal(ca["shirt"], cb["shirt"])


def test_spec_round_trip():
    assert WorldSpec.from_dict(TINY.to_dict()) == TINY
    empty = WorldSpec(sprite=None, point_count=2000)
    assert WorldSpec.from_dict(empty.to_dict()) == empty
    with pytest.raises(ValueError):
        WorldSpec(path_kind="zigzag")
    with pytest.raises(ValueError):
        WorldSpec(frames=0)
    with pytest.raises(ValueError):
        WorldSpec(point_count=10)


def test_scene_points_leave_the_subject_area_clear():
    cloud = make_scene(seed=7, point_count=4000, pillar_count=3)
    r = np.hypot(cloud.points[:, 0], cloud.points[:, 1])
    elevated = cloud.points[:, 2] > 0.05
    assert r[elevated].min() > 1.5  # pillars keep off the subject spot


def test_save_load_round_trip(tmp_path):
    bundle = generate_world(TINY)
    save_world(bundle, tmp_path / "w0")
    again = load_world(tmp_path / "w0")
    assert np.array_equal(again.gt, bundle.gt)
    assert again.spec == bundle.spec

    # tampering with the stored ground truth is detected
    raw = (tmp_path / "w0" / "gt.raw")
    data = bytearray(raw.read_bytes())
    data[100] ^= 0xFF
    raw.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="does not match"):
        load_world(tmp_path / "w0")


def test_composite_respects_alpha():
    bundle = generate_world(TINY)
    frame = bundle.env[0]
    box = bundle.track.boxes[0]
    h_c, w_c = TINY.canon_h, TINY.canon_w
    out = composite_sprite(frame, box, np.zeros((h_c, w_c, 3)),
                           np.zeros((h_c, w_c)), root_depth=4.0)
    assert np.array_equal(out.rgb, frame.rgb)  # fully transparent paste
    assert np.array_equal(out.depth, frame.depth)
    solid = composite_sprite(frame, box, np.ones((h_c, w_c, 3)),
                             np.ones((h_c, w_c)), root_depth=4.0)
    region = solid.rgb[box.y1:box.y2, box.x1:box.x2]
    assert np.array_equal(region, np.ones_like(region))
    assert solid.coverage[box.y1:box.y2, box.x1:box.x2].all()
