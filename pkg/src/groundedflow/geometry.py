"""Camera model, point-cloud rendering, and bbox grounding.

Conventions used throughout:

- World coordinates are right-handed with +z up.
- Camera coordinates follow the computer-vision convention: +x right,
  +y down, +z forward (into the scene).  A ``CameraPose`` maps world
  points to camera points via ``x_cam = R @ x_world + t``.
- Pixel coordinates (u, v) have u horizontal and v vertical, origin at
  the top-left pixel center.  Projection is the pinhole model
  ``u = f * x / z + cx``, ``v = f * y / z + cy``.
- Token coordinates are pixel coordinates integer-divided by the patch
  size.  Bbox corners are half-open token intervals [x1, x2) x [y1, y2).

All functions are pure and operate in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Occupancy ratio of the subject inside its bbox: the body spans 90% of
# the box height.  Shared constant of the grounding formulas below.
BODY_OCCUPANCY = 0.9

# Points closer than this camera-frame depth are culled.
DEFAULT_Z_NEAR = 0.1

DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal length and principal point in pixels."""

    f: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image"
            )


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rigid transform ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal to 1e-9")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points (..., 3) back to world coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation

    def compose(self, other: "CameraPose") -> "CameraPose":
        """Return the pose equivalent to applying ``other`` then ``self``."""
        return CameraPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates."""
        return -self.rotation.T @ self.translation

    def optical_axis(self) -> np.ndarray:
        """Unit view direction (+z of the camera frame) in world coordinates."""
        return self.rotation[2].copy()

    def allclose(self, other: "CameraPose", tol: float = 1e-6) -> bool:
        return (
            np.abs(self.rotation - other.rotation).max() <= tol
            and np.abs(self.translation - other.translation).max() <= tol
        )


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Build the pose of a camera at ``eye`` looking toward ``target``.

    ``up`` is the world direction that should map to "up" in the image
    (camera -y).  ``eye`` and ``target`` must not coincide, and the view
    direction must not be parallel to ``up``.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    forward = forward / norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise ValueError("view direction parallel to up vector")
    right = right / norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return CameraPose(rotation, -rotation @ eye)


@dataclass(eq=False)
class PointCloud:
    """Colored point cloud: ``points`` (N, 3) world units, ``colors`` (N, 3) in [0, 1]."""

    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ValueError(
                f"{len(self.points)} points but {len(self.colors)} colors"
            )
        if len(self.points) and (self.colors.min() < 0 or self.colors.max() > 1):
            raise ValueError("colors must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.points)

    def diameter(self) -> float:
        """Diagonal of the axis-aligned bounding box of the points."""
        if len(self.points) == 0:
            return 0.0
        span = self.points.max(axis=0) - self.points.min(axis=0)
        return float(np.linalg.norm(span))


@dataclass(eq=False)
class RgbdFrame:
    """Rendered frame: rgb (H, W, 3), depth (H, W) normalized inverse depth, coverage (H, W) bool."""

    rgb: np.ndarray
    depth: np.ndarray
    coverage: np.ndarray

    def validate(self, background=DEFAULT_BACKGROUND) -> None:
        empty = ~self.coverage
        if self.depth[empty].any():
            raise ValueError("depth must be 0 where coverage is 0")
        if not np.array_equal(
            self.rgb[empty], np.broadcast_to(background, (int(empty.sum()), 3))
        ):
            raise ValueError("rgb must equal the background color where coverage is 0")

    def stack(self) -> np.ndarray:
        """Concatenate rgb and depth into a (H, W, 4) conditioning array."""
        return np.concatenate([self.rgb, self.depth[..., None]], axis=-1)


def project_points(points_cam: np.ndarray, intr: CameraIntrinsics):
    """Pinhole-project camera-frame points (..., 3) to pixel coordinates.

    Returns (u, v, z) arrays.  No culling is performed; callers decide
    what to do with points at or behind the camera plane.
    """
    pts = np.asarray(points_cam, dtype=np.float64)
    z = pts[..., 2]
    u = intr.f * pts[..., 0] / z + intr.cx
    v = intr.f * pts[..., 1] / z + intr.cy
    return u, v, z


def project_point_cloud(
    cloud: PointCloud,
    pose: CameraPose,
    intr: CameraIntrinsics,
    z_near: float = DEFAULT_Z_NEAR,
    background=DEFAULT_BACKGROUND,
) -> RgbdFrame:
    """Render a point cloud to an RGB-D frame with a per-pixel z-buffer.

    Each point is splatted to its nearest pixel (floor(coord + 0.5)).
    The nearest point wins each pixel; ties at bit-equal depth go to the
    lower point index.  The depth channel stores clip(z_near / z, 0, 1);
    uncovered pixels get the background color and depth 0.
    """
    if intr.f <= 0:
        raise ValueError(f"focal length must be positive, got {intr.f}")
    if len(cloud) == 0:
        raise ValueError("cannot render an empty point cloud")
    h, w = intr.height, intr.width

    cam = pose.transform(cloud.points)
    u, v, z = project_points(cam, intr)
    valid = z > z_near
    px = np.floor(u + 0.5).astype(np.int64)
    py = np.floor(v + 0.5).astype(np.int64)
    valid &= (px >= 0) & (px < w) & (py >= 0) & (py < h)

    rgb = np.broadcast_to(np.asarray(background, dtype=np.float64), (h, w, 3)).copy()
    depth = np.zeros((h, w), dtype=np.float64)
    coverage = np.zeros((h, w), dtype=bool)

    idx = np.nonzero(valid)[0]
    if len(idx):
        pix = py[idx] * w + px[idx]
        # Sort by (pixel, depth, index); the first entry per pixel is the
        # nearest point, with bit-equal depths resolved to the lower index.
        order = np.lexsort((idx, z[idx], pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        winners = idx[order[first]]
        pw = pix_sorted[first]
        rgb.reshape(-1, 3)[pw] = cloud.colors[winners]
        depth.reshape(-1)[pw] = np.clip(z_near / z[winners], 0.0, 1.0)
        coverage.reshape(-1)[pw] = True

    return RgbdFrame(rgb=rgb, depth=depth, coverage=coverage)


@dataclass(frozen=True)
class BBox:
    """Per-frame subject box in both parameterizations.

    Corner form (x1, y1, x2, y2) is a half-open rectangle in token units.
    Center/scale form (u, v, a) is the exact square box in pixels from
    which the corners were derived by outward rounding; ``a`` is the side
    length.  ``frame`` is the frame index the box belongs to.
    """

    frame: int
    x1: int
    y1: int
    x2: int
    y2: int
    u: float
    v: float
    a: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(
                f"degenerate bbox corners ({self.x1},{self.y1},{self.x2},{self.y2})"
            )
        if self.a <= 0:
            raise ValueError(f"bbox scale must be positive, got {self.a}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    def center_tokens(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def with_frame(self, frame: int) -> "BBox":
        return BBox(frame, self.x1, self.y1, self.x2, self.y2, self.u, self.v, self.a)

    @classmethod
    def from_center_scale(
        cls,
        frame: int,
        u: float,
        v: float,
        a: float,
        grid_h: int,
        grid_w: int,
        patch: int,
    ) -> "BBox | None":
        """Quantize a square pixel box to token corners.

        Corners are rounded outward (floor for x1/y1, ceil for x2/y2) so
        the subject is never cropped, then clamped to the grid with a
        minimum side of one token.  Returns None when the box misses the
        grid entirely.
        """
        if a <= 0:
            raise ValueError(f"bbox scale must be positive, got {a}")
        half = a / 2.0
        x1 = np.floor((u - half) / patch)
        y1 = np.floor((v - half) / patch)
        x2 = np.ceil((u + half) / patch)
        y2 = np.ceil((v + half) / patch)
        if x2 <= 0 or y2 <= 0 or x1 >= grid_w or y1 >= grid_h:
            return None
        x1 = int(max(x1, 0))
        y1 = int(max(y1, 0))
        x2 = int(min(x2, grid_w))
        y2 = int(min(y2, grid_h))
        if x2 <= x1:
            x2 = min(x1 + 1, grid_w)
            x1 = x2 - 1
        if y2 <= y1:
            y2 = min(y1 + 1, grid_h)
            y1 = y2 - 1
        return cls(frame, x1, y1, x2, y2, float(u), float(v), float(a))

    @classmethod
    def from_corners(
        cls,
        frame: int,
        x1: int,
        y1: int,
        x2: int,
        y2: int,
        grid_h: int,
        grid_w: int,
        patch: int,
    ) -> "BBox":
        """Build a box from token corners, synthesizing its center/scale.

        Corners are authoritative here; the (u, v, a) annotation is
        derived bookkeeping with a = the larger side in pixels, the
        same convention the projection pipeline uses.
        """
        if not (0 <= x1 < x2 <= grid_w and 0 <= y1 < y2 <= grid_h):
            raise ValueError(
                f"corners ({x1},{y1},{x2},{y2}) do not describe a box "
                f"inside a {grid_h}x{grid_w} token grid"
            )
        u = patch * (x1 + x2) / 2.0
        v = patch * (y1 + y2) / 2.0
        a = patch * float(max(x2 - x1, y2 - y1))
        return cls(frame, x1, y1, x2, y2, u, v, a)


@dataclass(eq=False)
class PlacementTrack:
    """Per-frame bboxes on the token grid; ``None`` marks an absent subject."""

    boxes: list
    grid_h: int
    grid_w: int
    patch: int
    depths: list = field(default_factory=list)

    def __post_init__(self):
        if not self.depths:
            self.depths = [None] * len(self.boxes)
        if len(self.depths) != len(self.boxes):
            raise ValueError("depths and boxes must have equal length")

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, t: int):
        return self.boxes[t]

    def present(self) -> list:
        return [b is not None for b in self.boxes]

    def union_mask(self) -> np.ndarray:
        """Static union of all frame boxes as a (grid_h, grid_w) bool mask."""
        mask = np.zeros((self.grid_h, self.grid_w), dtype=bool)
        for box in self.boxes:
            if box is not None:
                mask[box.y1 : box.y2, box.x1 : box.x2] = True
        return mask


@dataclass(eq=False)
class RootTrajectory:
    """Subject root motion relative to its first frame.

    ``offsets`` holds the per-frame displacements (delta Gamma), with
    offsets[0] identically zero, expressed in the frame-0 camera-anchored
    coordinate system.  ``body_height`` is the subject height in world
    units.  ``p0`` optionally stores the grounded first-frame root.
    """

    offsets: np.ndarray
    body_height: float
    p0: np.ndarray | None = None

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        if len(self.offsets) == 0:
            raise ValueError("trajectory must cover at least one frame")
        if np.abs(self.offsets[0]).max() != 0.0:
            raise ValueError("first-frame offset must be exactly zero")
        if self.body_height <= 0:
            raise ValueError(f"body height must be positive, got {self.body_height}")

    def __len__(self) -> int:
        return len(self.offsets)

    def roots(self, p0: np.ndarray) -> np.ndarray:
        """Absolute per-frame roots P_t = P0 + offsets, anchor frame of P0."""
        return np.asarray(p0, dtype=np.float64).reshape(3) + self.offsets


def estimate_root_depth(body_height: float, a0: float, intr: CameraIntrinsics) -> float:
    """Depth of the subject root from its first-frame bbox side.

    The subject occupies BODY_OCCUPANCY of the box height, so a body of
    height H seen in a box of a0 pixels stands at Z0 = f*H / (0.9*a0).
    """
    if a0 <= 0:
        raise ValueError(f"bbox side must be positive, got {a0}")
    if body_height <= 0:
        raise ValueError(f"body height must be positive, got {body_height}")
    return intr.f * body_height / (BODY_OCCUPANCY * a0)


def backproject_bbox_center(bbox: BBox, z0: float, intr: CameraIntrinsics) -> np.ndarray:
    """Lift a bbox center to the camera-frame 3D point at depth z0."""
    if z0 <= 0:
        raise ValueError(f"depth must be positive, got {z0}")
    return np.array(
        [
            (bbox.u - intr.cx) * z0 / intr.f,
            (bbox.v - intr.cy) * z0 / intr.f,
            z0,
        ]
    )


def propagate_and_project(
    p0: np.ndarray,
    traj: RootTrajectory,
    poses: list,
    intr: CameraIntrinsics,
    body_height: float | None = None,
    grid_h: int | None = None,
    grid_w: int | None = None,
    patch: int = 1,
    z_near: float = DEFAULT_Z_NEAR,
) -> PlacementTrack:
    """Propagate a grounded root along its trajectory and project per-frame bboxes.

    ``p0`` and the trajectory offsets live in the frame-0 camera-anchored
    coordinate system: P_t = p0 + offsets[t] is mapped to world
    coordinates through the inverse of poses[0], then into camera t.  The
    box side follows the scale law a_t = f*H / (0.9 * Z_t).  Frames whose
    root falls behind the camera (Z_t <= z_near) or whose box misses the
    grid are marked absent.
    """
    if len(traj) != len(poses):
        raise ValueError(f"trajectory has {len(traj)} frames but {len(poses)} poses")
    if body_height is None:
        body_height = traj.body_height
    if grid_h is None:
        grid_h = intr.height // patch
    if grid_w is None:
        grid_w = intr.width // patch

    anchor = poses[0]
    roots_anchor = traj.roots(p0)
    scale_const = intr.f * body_height / BODY_OCCUPANCY

    boxes, depths = [], []
    for t, pose in enumerate(poses):
        world = anchor.inverse_transform(roots_anchor[t])
        cam = pose.transform(world)
        z = float(cam[2])
        if z <= z_near:
            boxes.append(None)
            depths.append(None)
            continue
        u = intr.f * cam[0] / z + intr.cx
        v = intr.f * cam[1] / z + intr.cy
        a = scale_const / z
        box = BBox.from_center_scale(t, float(u), float(v), a, grid_h, grid_w, patch)
        boxes.append(box)
        depths.append(z if box is not None else None)
    return PlacementTrack(boxes=boxes, grid_h=grid_h, grid_w=grid_w, patch=patch, depths=depths)


def static_bbox_track(
    bbox0: BBox, frames: int, grid_h: int, grid_w: int, patch: int = 1
) -> PlacementTrack:
    """Replicate one box across ``frames`` frames (static-subject regime)."""
    if frames < 1:
        raise ValueError(f"frame count must be >= 1, got {frames}")
    boxes = [bbox0.with_frame(t) for t in range(frames)]
    return PlacementTrack(boxes=boxes, grid_h=grid_h, grid_w=grid_w, patch=patch)
