"""Synthetic human-in-scene world: geometry, sprite, and compositing oracle.

Everything here is deliberately simple and exactly reproducible: a
checkerboard ground plane with colored pillars rendered from a point
cloud, a stick-figure sprite whose pose is an analytic function of a
phase variable, and a compositing rule that pastes the sprite's
canonical-resolution rendering into each frame's bbox.  The composited
sequence is the ground truth that trained models are scored against,
so the compositor doubles as the evaluation oracle: it uses only
information the model itself receives (environment render, canonical
motion map, identity colors, bbox track).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import fileio
from .conditioning import CanonicalMotionSequence
from .geometry import (
    BODY_OCCUPANCY,
    DEFAULT_Z_NEAR,
    BBox,
    CameraIntrinsics,
    CameraPose,
    PlacementTrack,
    PointCloud,
    RgbdFrame,
    RootTrajectory,
    look_at,
    project_point_cloud,
    propagate_and_project,
)

PATH_KINDS = ("orbit", "dolly", "loop_and_revisit")
MOTION_KINDS = ("wave", "walk", "bounce", "sway")

# canonical skeleton: unit square, y down, body spans y in [0.05, 0.95]
BASE_JOINTS = {
    "head": (0.50, 0.10),
    "neck": (0.50, 0.26),
    "pelvis": (0.50, 0.55),
    "l_hand": (0.33, 0.43),
    "r_hand": (0.67, 0.43),
    "l_knee": (0.43, 0.74),
    "r_knee": (0.57, 0.74),
    "l_foot": (0.41, 0.94),
    "r_foot": (0.59, 0.94),
}
MIRROR_PAIRS = (("l_hand", "r_hand"), ("l_knee", "r_knee"), ("l_foot", "r_foot"))
CENTER_JOINTS = ("head", "neck", "pelvis")

# bones as (joint_a, joint_b, radius, part); part picks color and heat group
BONES = (
    ("head", "head", 0.085, "skin"),
    ("neck", "pelvis", 0.090, "shirt"),
    ("neck", "l_hand", 0.042, "shirt"),
    ("neck", "r_hand", 0.042, "shirt"),
    ("pelvis", "l_knee", 0.048, "pants"),
    ("pelvis", "r_knee", 0.048, "pants"),
    ("l_knee", "l_foot", 0.045, "pants"),
    ("r_knee", "r_foot", 0.045, "pants"),
)
# heat channel grouping: 0 = head, 1 = torso and arms, 2 = legs
HEAT_GROUPS = {
    0: ("head",),
    1: ("neck", "l_hand", "r_hand"),
    2: ("pelvis", "l_knee", "r_knee", "l_foot", "r_foot"),
}
HEAT_SIGMA = 1.2  # pixels on the canonical grid


@dataclass(frozen=True)
class SpriteSpec:
    """Identity (colors) plus the motion phase function driving the joints."""

    identity_seed: int = 0
    joint_count: int = 9
    motion: str = "wave"
    height: float = 1.8
    amplitude: float = 1.0

    def __post_init__(self):
        if self.joint_count != len(BASE_JOINTS):
            raise ValueError(
                f"the skeleton has {len(BASE_JOINTS)} joints; got joint_count={self.joint_count}"
            )
        if self.motion not in MOTION_KINDS:
            raise ValueError(f"unknown motion {self.motion!r}; choose from {MOTION_KINDS}")
        if self.height <= 0:
            raise ValueError(f"body height must be positive, got {self.height}")
        if not (0.0 <= self.amplitude <= 2.0):
            raise ValueError(f"amplitude must lie in [0, 2], got {self.amplitude}")


@dataclass(frozen=True)
class WorldSpec:
    """One reproducible world: scene layout, camera path, sprite, grids."""

    scene_seed: int = 0
    point_count: int = 60000
    pillar_count: int = 4
    path_kind: str = "orbit"
    frames: int = 8
    sprite: SpriteSpec | None = field(default_factory=SpriteSpec)
    grid_h: int = 24
    grid_w: int = 24
    canon_h: int = 12
    canon_w: int = 12

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError(f"frame count must be >= 1, got {self.frames}")
        if self.path_kind not in PATH_KINDS:
            raise ValueError(f"unknown path kind {self.path_kind!r}; choose from {PATH_KINDS}")
        if self.point_count < 1000:
            raise ValueError(f"point budget too small to cover the grid: {self.point_count}")
        if self.pillar_count < 0:
            raise ValueError(f"pillar count must be >= 0, got {self.pillar_count}")

    def to_dict(self) -> dict:
        d = {
            "scene_seed": self.scene_seed, "point_count": self.point_count,
            "pillar_count": self.pillar_count, "path_kind": self.path_kind,
            "frames": self.frames, "grid_h": self.grid_h, "grid_w": self.grid_w,
            "canon_h": self.canon_h, "canon_w": self.canon_w,
        }
        if self.sprite is not None:
            d["sprite"] = {
                "identity_seed": self.sprite.identity_seed,
                "joint_count": self.sprite.joint_count,
                "motion": self.sprite.motion,
                "height": self.sprite.height,
                "amplitude": self.sprite.amplitude,
            }
        else:
            d["sprite"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        sprite = d.pop("sprite", None)
        return cls(sprite=SpriteSpec(**sprite) if sprite else None, **d)


def make_intrinsics(grid_w: int = 24, grid_h: int = 24) -> CameraIntrinsics:
    """Pinhole intrinsics sized so a ~4-unit-distant subject spans ~10 tokens."""
    return CameraIntrinsics(
        f=0.92 * grid_w, cx=grid_w / 2.0, cy=grid_h / 2.0, width=grid_w, height=grid_h
    )


def make_scene(seed: int, point_count: int = 60000, pillar_count: int = 4,
               extent: float = 5.0) -> PointCloud:
    """Checkerboard ground plane plus colored box pillars on a ring.

    Pillars sit at radius >= 2.2 so the subject area near the origin
    stays clear.  Colors are drawn once per scene seed.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 101])))

    ground_budget = int(point_count * 0.7)
    side = max(int(np.sqrt(ground_budget)), 32)
    coords = (np.arange(side) + 0.5) / side * (2 * extent) - extent
    gx, gy = np.meshgrid(coords, coords)
    ground_pts = np.stack([gx.ravel(), gy.ravel(), np.zeros(side * side)], axis=1)
    ca = rng.uniform(0.45, 0.95, 3)
    cb = rng.uniform(0.05, 0.40, 3)
    parity = (np.floor(gx.ravel()) + np.floor(gy.ravel())).astype(int) % 2
    ground_cols = np.where(parity[:, None] == 0, ca, cb)

    pts, cols = [ground_pts], [ground_cols]
    if pillar_count:
        per = max((point_count - len(ground_pts)) // pillar_count, 200)
        angles = rng.uniform(0, 2 * np.pi, pillar_count)
        radii = rng.uniform(2.2, extent - 0.6, pillar_count)
        sides_len = rng.uniform(0.45, 0.85, pillar_count)
        heights = rng.uniform(1.3, 2.6, pillar_count)
        colors = rng.uniform(0.15, 1.0, (pillar_count, 3))
        for p in range(pillar_count):
            cx, cy_ = radii[p] * np.cos(angles[p]), radii[p] * np.sin(angles[p])
            s, h = sides_len[p], heights[p]
            n_side = max(int(np.sqrt(per / 5)), 8)
            lin = (np.arange(n_side) + 0.5) / n_side
            u, w = np.meshgrid(lin * s - s / 2, lin * h)
            flat_u, flat_w = u.ravel(), w.ravel()
            walls = [
                np.stack([cx + flat_u, cy_ - s / 2 * np.ones_like(flat_u), flat_w], axis=1),
                np.stack([cx + flat_u, cy_ + s / 2 * np.ones_like(flat_u), flat_w], axis=1),
                np.stack([cx - s / 2 * np.ones_like(flat_u), cy_ + flat_u, flat_w], axis=1),
                np.stack([cx + s / 2 * np.ones_like(flat_u), cy_ + flat_u, flat_w], axis=1),
            ]
            tu, tv = np.meshgrid(lin * s - s / 2, lin * s - s / 2)
            top = np.stack([cx + tu.ravel(), cy_ + tv.ravel(), h * np.ones(tu.size)], axis=1)
            block = np.concatenate(walls + [top], axis=0)
            pts.append(block)
            cols.append(np.tile(colors[p], (len(block), 1)))

    return PointCloud(points=np.concatenate(pts), colors=np.concatenate(cols))


def camera_path(kind: str, frames: int, seed: int, radius: float = 4.2,
                height: float = 1.7, target=(0.0, 0.0, 0.9)) -> list:
    """Camera poses along a named path, all looking at the subject area.

    loop_and_revisit spreads a full turn over the clip so the last pose
    lands back on the first one (within floating-point error); orbit
    sweeps a partial arc; dolly moves along a straight line.
    """
    if kind not in PATH_KINDS:
        raise ValueError(f"unknown path kind {kind!r}; choose from {PATH_KINDS}")
    if frames < 1:
        raise ValueError(f"frame count must be >= 1, got {frames}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 202])))
    theta0 = rng.uniform(0, 2 * np.pi)
    poses = []
    if kind == "dolly":
        t0 = np.array([radius * np.cos(theta0), radius * np.sin(theta0), height])
        side = np.array([-np.sin(theta0), np.cos(theta0), 0.0])
        t1 = t0 * 0.72 + side * 1.4
        for i in range(frames):
            a = i / max(frames - 1, 1)
            poses.append(look_at(t0 * (1 - a) + t1 * a, target))
        return poses
    sweep = 2 * np.pi if kind == "loop_and_revisit" else np.deg2rad(110.0)
    for i in range(frames):
        ang = theta0 + sweep * (i / max(frames - 1, 1))
        eye = (radius * np.cos(ang), radius * np.sin(ang), height)
        poses.append(look_at(eye, target))
    return poses


# ----------------------------------------------------------------- sprite pose

def _pair_offsets(motion: str, phase: float) -> dict:
    """Right-side joint offsets g(phase); the left side uses -g_x(phase+pi)."""
    s, c = np.sin(phase), np.cos(phase)
    if motion == "wave":
        return {"r_hand": (0.02 * s, -0.15 * (1 + s) / 2 - 0.06),
                "r_knee": (0.0, 0.0), "r_foot": (0.0, 0.0)}
    if motion == "walk":
        return {"r_hand": (-0.06 * s, 0.0),
                "r_knee": (0.045 * s, -0.01 * (1 - c)),
                "r_foot": (0.09 * s, -0.02 * (1 - c))}
    if motion == "bounce":
        crouch = 0.03 * (1 - np.cos(2 * phase)) / 2  # pi-periodic squash
        return {"r_hand": (0.0, -crouch), "r_knee": (0.025 * (1 - np.cos(2 * phase)) / 2, 0.0),
                "r_foot": (0.0, 0.0)}
    if motion == "sway":
        return {"r_hand": (0.05 * s, 0.0), "r_knee": (0.0, 0.0), "r_foot": (0.0, 0.0)}
    raise ValueError(f"unknown motion {motion!r}")


def _center_offsets(motion: str, phase: float) -> dict:
    s = np.sin(phase)
    if motion == "bounce":
        dy = 0.03 * (1 - np.cos(2 * phase)) / 2
        return {"head": (0.0, dy), "neck": (0.0, dy * 0.8), "pelvis": (0.0, dy * 0.5)}
    if motion == "sway":
        return {"head": (0.05 * s, 0.0), "neck": (0.04 * s, 0.0), "pelvis": (0.015 * s, 0.0)}
    return {}


def sprite_joints(motion: str, phase: float, amplitude: float = 1.0) -> dict:
    """Canonical joint positions at a given phase.

    Mirrored pairs move in opposite phase by construction: the left
    joint's offset is the right joint's at phase + pi, x-negated.
    """
    joints = {name: np.array(pos, dtype=np.float64) for name, pos in BASE_JOINTS.items()}
    right = _pair_offsets(motion, phase)
    right_pi = _pair_offsets(motion, phase + np.pi)
    for left, r in MIRROR_PAIRS:
        dx, dy = right[r]
        joints[r] += amplitude * np.array([dx, dy])
        mdx, mdy = right_pi[r]
        joints[left] += amplitude * np.array([-mdx, mdy])
    for name, (dx, dy) in _center_offsets(motion, phase).items():
        joints[name] += amplitude * np.array([dx, dy])
    return joints


def root_offset(motion: str, phase_index: int, frames: int, amplitude: float = 1.0) -> np.ndarray:
    """Per-frame root displacement in the frame-0 camera-anchored frame.

    Camera axes: +x right, +y down, +z forward; offsets start at zero
    on frame 0 by construction.
    """
    if frames < 2:
        return np.zeros(3)
    a = phase_index / (frames - 1)
    phase = 2 * np.pi * a
    if motion == "walk":
        return amplitude * np.array([0.9 * a, 0.0, 0.0])
    if motion == "bounce":
        return amplitude * np.array([0.0, -0.22 * abs(np.sin(phase)), 0.0])
    if motion == "sway":
        return amplitude * np.array([0.30 * np.sin(phase), 0.0, 0.0])
    return np.zeros(3)  # wave: stationary root


def identity_colors(seed: int) -> dict:
    """Skin/shirt/pants palette for one identity."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 303])))
    skin = np.array([0.87, 0.72, 0.58]) * rng.uniform(0.75, 1.1)
    shirt = rng.uniform(0.15, 0.95, 3)
    pants = rng.uniform(0.05, 0.7, 3)
    return {
        "skin": np.clip(skin, 0, 1),
        "shirt": np.clip(shirt, 0, 1),
        "pants": np.clip(pants, 0, 1),
    }


def _bone_distance(px, py, ax, ay, bx, by):
    """Distance from pixel centers to segment (a, b), vectorized."""
    abx, aby = bx - ax, by - ay
    denom = abx * abx + aby * aby
    if denom < 1e-18:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * abx + (py - ay) * aby) / denom, 0.0, 1.0)
    return np.hypot(px - (ax + t * abx), py - (ay + t * aby))


def render_sprite(joints: dict, colors: dict, h: int, w: int,
                  window=(0.0, 0.0, 1.0, 1.0)):
    """Rasterize the capsule sprite onto an (h, w) grid.

    window = (x0, y0, x1, y1) selects the canonical sub-rectangle to
    render (used for the face crop); the default covers the full body.
    Returns (rgb, alpha) with alpha softly feathered over half a pixel.
    """
    x0, y0, x1, y1 = window
    xs = x0 + (np.arange(w) + 0.5) / w * (x1 - x0)
    ys = y0 + (np.arange(h) + 0.5) / h * (y1 - y0)
    px, py = np.meshgrid(xs, ys)
    soft = 0.5 * (x1 - x0) / w

    alpha = np.zeros((h, w))
    rgb = np.zeros((h, w, 3))
    best = np.full((h, w), np.inf)
    for a, b, radius, part in BONES:
        ax, ay = joints[a]
        bx, by = joints[b]
        d = _bone_distance(px, py, ax, ay, bx, by)
        cov = np.clip((radius - d) / soft + 0.5, 0.0, 1.0)
        alpha = np.maximum(alpha, cov)
        signed = d - radius
        take = signed < best
        best = np.where(take, signed, best)
        rgb = np.where(take[..., None], colors[part], rgb)
    rgb = rgb * (alpha[..., None] > 0)
    return rgb, alpha


def motion_maps(joints: dict, h_c: int, w_c: int) -> np.ndarray:
    """Canonical motion map: three grouped joint heat channels + silhouette."""
    maps = np.zeros((h_c, w_c, 4))
    ys, xs = np.meshgrid(np.arange(h_c) + 0.5, np.arange(w_c) + 0.5, indexing="ij")
    for ch, names in HEAT_GROUPS.items():
        acc = np.zeros((h_c, w_c))
        for name in names:
            jx, jy = joints[name][0] * w_c, joints[name][1] * h_c
            d2 = (xs - jx) ** 2 + (ys - jy) ** 2
            acc += np.exp(-d2 / (2 * HEAT_SIGMA**2))
        maps[..., ch] = np.clip(acc, 0.0, 1.0)
    neutral = {"skin": np.ones(3), "shirt": np.ones(3), "pants": np.ones(3)}
    _, alpha = render_sprite(joints, neutral, h_c, w_c)
    maps[..., 3] = alpha
    return maps


# --------------------------------------------------------------- compositing

def _area_weights(n_out: int, n_in: int) -> np.ndarray:
    """Box-filter resampling matrix (n_out, n_in); rows sum to 1.

    Each output cell averages the input cells its source interval
    overlaps, weighted by overlap length.  Symmetric mass-preserving
    resampling, so centroids map exactly under the scale change.
    """
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for j in range(n_out):
        lo, hi = j * scale, (j + 1) * scale
        i0, i1 = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(i0, min(i1, n_in)):
            w[j, i] = min(hi, i + 1) - max(lo, i)
    return w / scale


def composite_sprite(frame: RgbdFrame, box: BBox, sprite_rgb: np.ndarray,
                     sprite_alpha: np.ndarray, root_depth: float,
                     patch: int = 1, z_near: float = DEFAULT_Z_NEAR) -> RgbdFrame:
    """Paste a canonical-resolution sprite rendering into a bbox.

    The canonical render is rescaled to the box's pixel rectangle with
    an area (box-filter) resample, which keeps the sprite's centroid on
    the box center, then alpha-composited over the environment; the
    sprite's depth channel is the constant clipped inverse depth of its
    root.  The output is a new frame; the input is untouched.
    """
    h_c, w_c = sprite_alpha.shape
    px1, py1 = box.x1 * patch, box.y1 * patch
    px2, py2 = box.x2 * patch, box.y2 * patch
    h_r, w_r = py2 - py1, px2 - px1
    wy = _area_weights(h_r, h_c)
    wx = _area_weights(w_r, w_c)
    a = wy @ sprite_alpha @ wx.T
    premult = np.einsum("ri,ijc,sj->rsc", wy, sprite_alpha[..., None] * sprite_rgb, wx)
    srgb = np.divide(premult, a[..., None], out=np.zeros_like(premult), where=a[..., None] > 1e-12)
    a = a[..., None]
    sdepth = float(np.clip(z_near / root_depth, 0.0, 1.0))

    rgb = frame.rgb.copy()
    depth = frame.depth.copy()
    coverage = frame.coverage.copy()
    region = rgb[py1:py2, px1:px2]
    rgb[py1:py2, px1:px2] = a * srgb + (1 - a) * region
    depth[py1:py2, px1:px2] = a[..., 0] * sdepth + (1 - a[..., 0]) * depth[py1:py2, px1:px2]
    coverage[py1:py2, px1:px2] |= a[..., 0] > 0
    return RgbdFrame(rgb=rgb, depth=depth, coverage=coverage)


# ------------------------------------------------------------ world assembly

@dataclass(eq=False)
class WorldBundle:
    """Everything one training/eval world provides."""

    spec: WorldSpec
    scene: PointCloud
    intrinsics: CameraIntrinsics
    poses: list
    env: list            # per-frame RgbdFrame environment renders
    motion: CanonicalMotionSequence
    track: PlacementTrack
    traj: RootTrajectory
    gt: np.ndarray       # (T, H, W, 4) composited rgb+depth in [0, 1]
    identity: np.ndarray  # (2, H, W, 3) full-body + face reference frames
    colors: dict

    def env_stack(self) -> np.ndarray:
        return np.stack([f.stack() for f in self.env])


def _phase(t: int, frames: int) -> float:
    return 2 * np.pi * t / max(frames - 1, 1)


def _identity_frames(colors: dict, grid_h: int, grid_w: int) -> np.ndarray:
    """Two reference frames: neutral full body and a head close-up."""
    neutral = sprite_joints("wave", 0.0, amplitude=0.0)
    bg = 0.35
    full_rgb, full_a = render_sprite(neutral, colors, grid_h, grid_w)
    full = full_a[..., None] * full_rgb + (1 - full_a[..., None]) * bg
    face_rgb, face_a = render_sprite(neutral, colors, grid_h, grid_w,
                                     window=(0.28, 0.0, 0.72, 0.40))
    face = face_a[..., None] * face_rgb + (1 - face_a[..., None]) * bg
    return np.stack([full, face])


def generate_world(spec: WorldSpec) -> WorldBundle:
    """Build one deterministic world; see the module docstring for the rules.

    The sprite's root starts above the origin and follows the motion's
    root offsets; if any frame's bbox leaves the camera frustum the
    offsets are halved (deterministically, up to four times) until the
    whole track is visible.
    """
    scene = make_scene(spec.scene_seed, spec.point_count, spec.pillar_count)
    intr = make_intrinsics(spec.grid_w, spec.grid_h)
    poses = camera_path(spec.path_kind, spec.frames, spec.scene_seed)
    env = [project_point_cloud(scene, pose, intr) for pose in poses]

    if spec.sprite is None:
        maps = np.zeros((spec.frames, spec.canon_h, spec.canon_w, 4))
        motion = CanonicalMotionSequence(maps=maps, root_offsets=np.zeros((spec.frames, 3)))
        track = PlacementTrack(
            boxes=[None] * spec.frames, grid_h=spec.grid_h, grid_w=spec.grid_w,
            patch=1, depths=[None] * spec.frames,
        )
        traj = RootTrajectory(offsets=np.zeros((spec.frames, 3)), body_height=1.0)
        gt = np.stack([f.stack() for f in env])
        ident = np.full((2, spec.grid_h, spec.grid_w, 3), 0.35)
        return WorldBundle(spec, scene, intr, poses, env, motion, track, traj,
                           gt, ident, colors={})

    sp = spec.sprite
    root_world = np.array([0.0, 0.0, sp.height / 2.0])
    p0 = poses[0].transform(root_world)

    track = None
    amp = sp.amplitude
    for _ in range(5):
        offsets = np.stack(
            [root_offset(sp.motion, t, spec.frames, amp) for t in range(spec.frames)]
        )
        traj = RootTrajectory(offsets=offsets, body_height=sp.height, p0=p0)
        cand = propagate_and_project(
            p0, traj, poses, intr, grid_h=spec.grid_h, grid_w=spec.grid_w, patch=1
        )
        if all(b is not None for b in cand.boxes):
            track = cand
            break
        amp *= 0.5
    if track is None:
        raise ValueError(
            f"subject leaves the frustum on path {spec.path_kind!r} even with "
            f"amplitude {amp}; adjust the camera path or motion"
        )

    colors = identity_colors(sp.identity_seed)
    joints = [sprite_joints(sp.motion, _phase(t, spec.frames), sp.amplitude)
              for t in range(spec.frames)]
    maps = np.stack([motion_maps(j, spec.canon_h, spec.canon_w) for j in joints])
    motion = CanonicalMotionSequence(maps=maps, root_offsets=traj.offsets)

    gt_frames = []
    for t in range(spec.frames):
        srgb, salpha = render_sprite(joints[t], colors, spec.canon_h, spec.canon_w)
        gt_frames.append(
            composite_sprite(env[t], track.boxes[t], srgb, salpha, track.depths[t])
        )
    gt = np.stack([f.stack() for f in gt_frames])
    ident = _identity_frames(colors, spec.grid_h, spec.grid_w)
    return WorldBundle(spec, scene, intr, poses, env, motion, track, traj,
                       gt, ident, colors=colors)


# ------------------------------------------------------------------- file I/O

def save_track(path, track: PlacementTrack) -> None:
    rows = []
    for box, depth in zip(track.boxes, track.depths):
        if box is None:
            rows.append(None)
        else:
            rows.append({
                "frame": box.frame, "x1": box.x1, "y1": box.y1,
                "x2": box.x2, "y2": box.y2, "u": box.u, "v": box.v, "a": box.a,
                "depth": depth,
            })
    payload = {"grid_h": track.grid_h, "grid_w": track.grid_w,
               "patch": track.patch, "boxes": rows}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_track(path) -> PlacementTrack:
    with open(path) as fh:
        payload = json.load(fh)
    boxes, depths = [], []
    for row in payload["boxes"]:
        if row is None:
            boxes.append(None)
            depths.append(None)
            continue
        depths.append(row.pop("depth"))
        boxes.append(BBox(**row))
    return PlacementTrack(
        boxes=boxes, grid_h=payload["grid_h"], grid_w=payload["grid_w"],
        patch=payload["patch"], depths=depths,
    )


def save_world(bundle: WorldBundle, directory) -> None:
    """Materialize a world for the CLI: renders, maps, track, metadata."""
    os.makedirs(directory, exist_ok=True)
    d = os.fspath(directory)
    fileio.save_point_cloud(os.path.join(d, "scene.xyz"), bundle.scene)
    fileio.save_camera_path(os.path.join(d, "cameras.txt"), bundle.poses, bundle.intrinsics)
    fileio.save_rgbd_sequence(os.path.join(d, "env"), bundle.env)
    bundle.motion.save(os.path.join(d, "motion"))
    save_track(os.path.join(d, "track.json"), bundle.track)
    fileio.save_raw_tensor(os.path.join(d, "gt"), bundle.gt, meta={"kind": "rgbd_video"})
    fileio.save_raw_tensor(os.path.join(d, "identity"), bundle.identity,
                           meta={"kind": "identity_frames"})
    with open(os.path.join(d, "spec.json"), "w") as fh:
        json.dump(bundle.spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_world(directory) -> WorldBundle:
    d = os.fspath(directory)
    with open(os.path.join(d, "spec.json")) as fh:
        spec = WorldSpec.from_dict(json.load(fh))
    # regenerating is cheaper than serializing every derived field and
    # guarantees the loaded bundle matches the saved artifacts
    bundle = generate_world(spec)
    gt, _ = fileio.load_raw_tensor(os.path.join(d, "gt"))
    # raw tensors are stored at f32; compare at storage precision
    expected = bundle.gt.astype(np.float32).astype(np.float64)
    if not np.array_equal(gt, expected):
        raise ValueError(f"{d}: stored ground truth does not match its spec; regenerate")
    return bundle
