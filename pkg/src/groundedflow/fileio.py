"""File formats: point clouds, camera paths, PPM/depth frames, raw tensors.

Text formats use `#` line comments and whitespace-separated floats.
Binary formats are little-endian throughout.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, PointCloud, RgbdFrame


def _data_lines(path: Path):
    """Yield (line_number, stripped_text) for non-comment, non-blank lines."""
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if text:
                yield lineno, text


def load_point_cloud(path) -> PointCloud:
    """Load a text point cloud: one `x y z r g b` line per point."""
    path = Path(path)
    points, colors = [], []
    for lineno, text in _data_lines(path):
        fields = text.split()
        if len(fields) != 6:
            raise ValueError(
                f"{path}:{lineno}: expected 6 fields `x y z r g b`, got {len(fields)}"
            )
        try:
            values = [float(v) for v in fields]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field in {text!r}") from None
        points.append(values[:3])
        colors.append(values[3:])
    if not points:
        raise ValueError(f"{path}: no points found")
    return PointCloud(np.array(points), np.array(colors))


def save_point_cloud(path, cloud: PointCloud) -> None:
    with open(path, "w") as fh:
        fh.write("# x y z r g b\n")
        for p, c in zip(cloud.points, cloud.colors):
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {c[0]:.17g} {c[1]:.17g} {c[2]:.17g}\n")


def load_camera_path(path):
    """Load a camera path file.

    Each pose line carries 12 floats: the 3x3 rotation in row-major order
    followed by the translation.  An optional header line of 5 floats
    `f cx cy W H` before the first pose declares intrinsics.

    Returns (poses, intrinsics-or-None).
    """
    path = Path(path)
    poses = []
    intr = None
    for lineno, text in _data_lines(path):
        fields = text.split()
        try:
            values = [float(v) for v in fields]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field in {text!r}") from None
        if len(values) == 5 and not poses and intr is None:
            intr = CameraIntrinsics(
                f=values[0], cx=values[1], cy=values[2],
                width=int(values[3]), height=int(values[4]),
            )
        elif len(values) == 12:
            rotation = np.array(values[:9]).reshape(3, 3)
            try:
                poses.append(CameraPose(rotation, np.array(values[9:])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
        else:
            raise ValueError(
                f"{path}:{lineno}: expected 12 pose values (or a 5-value "
                f"intrinsics header), got {len(values)}"
            )
    if not poses:
        raise ValueError(f"{path}: no poses found")
    return poses, intr


def save_camera_path(path, poses, intr: CameraIntrinsics | None = None) -> None:
    with open(path, "w") as fh:
        fh.write("# camera path: optional `f cx cy W H` header, then per-frame\n")
        fh.write("# 9 row-major rotation entries + 3 translation entries\n")
        if intr is not None:
            fh.write(f"{intr.f:.17g} {intr.cx:.17g} {intr.cy:.17g} {intr.width} {intr.height}\n")
        for pose in poses:
            entries = list(pose.rotation.reshape(-1)) + list(pose.translation)
            fh.write(" ".join(f"{v:.17g}" for v in entries) + "\n")


def save_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary PPM (P6)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {rgb.shape}")
    h, w = rgb.shape[:2]
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) into an (H, W, 3) float image in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with `#` comments allowed; a single whitespace byte ends the header.
    tokens, pos = [], 0
    while len(tokens) < 4:
        if pos >= len(blob):
            raise ValueError(f"{path}: truncated PPM header")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            pos = blob.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end : end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos)
    if data.size != h * w * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def save_depth_stack(path, depth: np.ndarray) -> None:
    """Write (T, H, W) depth frames: ASCII header `W H T`, then f32 LE data."""
    depth = np.asarray(depth)
    if depth.ndim != 3:
        raise ValueError(f"expected (T, H, W) depth stack, got {depth.shape}")
    t, h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"{w} {h} {t}\n".encode())
        fh.write(depth.astype("<f4").tobytes())


def load_depth_stack(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError(f"{path}: expected `W H T` header")
        w, h, t = (int(v) for v in header)
        data = np.frombuffer(fh.read(), dtype="<f4", count=-1)
    if data.size != t * h * w:
        raise ValueError(f"{path}: expected {t * h * w} depth values, got {data.size}")
    return data.reshape(t, h, w).astype(np.float64)


def save_rgbd_sequence(directory, frames, stem: str = "frame") -> None:
    """Export RgbdFrames as numbered PPMs plus one depth stack file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        save_ppm(directory / f"{stem}_{i:04d}.ppm", frame.rgb)
    save_depth_stack(directory / f"{stem}_depth.raw", np.stack([f.depth for f in frames]))


def load_rgbd_sequence(directory, stem: str = "frame"):
    directory = Path(directory)
    depth = load_depth_stack(directory / f"{stem}_depth.raw")
    frames = []
    for i in range(depth.shape[0]):
        rgb = load_ppm(directory / f"{stem}_{i:04d}.ppm")
        frames.append(RgbdFrame(rgb=rgb, depth=depth[i], coverage=depth[i] > 0))
    return frames


def save_raw_tensor(basepath, array: np.ndarray, meta: dict | None = None) -> None:
    """Write `<base>.raw` (f32 LE, C order) plus a `<base>.json` sidecar.

    The sidecar records shape and dtype together with any caller metadata
    (e.g. segment labels), so the array round-trips without guesswork.
    """
    basepath = Path(basepath)
    array = np.asarray(array)
    sidecar = {"shape": list(array.shape), "dtype": "float32"}
    if meta:
        sidecar.update(meta)
    with open(basepath.with_suffix(".raw"), "wb") as fh:
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    with open(basepath.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_raw_tensor(basepath):
    """Read a `<base>.raw` + `<base>.json` pair; returns (array, sidecar_dict)."""
    basepath = Path(basepath)
    with open(basepath.with_suffix(".json")) as fh:
        meta = json.load(fh)
    shape = tuple(meta["shape"])
    data = np.fromfile(basepath.with_suffix(".raw"), dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ValueError(
            f"{basepath}.raw: expected {expected} values for shape {shape}, got {data.size}"
        )
    return data.reshape(shape).astype(np.float64), meta
