"""Desk-scale evaluation metrics and the report they roll up into.

All metrics work on (T, H, W, 4) rgb+depth stacks in [0, 1] pixel
space.  Placement is the energy-weighted centroid of the deviation
from the environment render, so it needs no ground-truth pixels and
works for cross-composed worlds; background consistency is plain MSE
outside the union of the subject boxes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import PlacementTrack

CENTROID_MIN_ENERGY = 1e-6


def _pixel_union(track: PlacementTrack) -> np.ndarray:
    """Union box mask at pixel resolution (token mask blown up by patch)."""
    mask = track.union_mask()
    if track.patch > 1:
        mask = np.kron(mask, np.ones((track.patch, track.patch), dtype=bool))
    return mask


def subject_centroid(frame: np.ndarray, reference: np.ndarray, patch: int = 1):
    """Energy-weighted centroid (in tokens) of |frame - reference|.

    Returns None when the frame carries no subject signal (total energy
    below threshold), e.g. an absent subject.
    """
    energy = np.abs(np.asarray(frame, float) - np.asarray(reference, float)).sum(axis=-1)
    total = energy.sum()
    if total < CENTROID_MIN_ENERGY:
        return None
    h, w = energy.shape
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    cy = float((energy * ys).sum() / total)
    cx = float((energy * xs).sum() / total)
    return cx / patch, cy / patch


def placement_error(video: np.ndarray, env: np.ndarray, track: PlacementTrack) -> float:
    """Mean distance (tokens) between subject centroid and box center.

    Frames with an absent box or no subject signal are skipped; if every
    frame is skipped the error is defined as 0 (nothing to place).
    """
    video = np.asarray(video, float)
    env = np.asarray(env, float)
    if video.shape != env.shape:
        raise ValueError(f"video {video.shape} and environment {env.shape} differ")
    errors = []
    for t, box in enumerate(track.boxes):
        if box is None:
            continue
        cent = subject_centroid(video[t], env[t], track.patch)
        if cent is None:
            continue
        bx, by = box.center_tokens()
        errors.append(float(np.hypot(cent[0] - bx, cent[1] - by)))
    return float(np.mean(errors)) if errors else 0.0


def background_mse(video: np.ndarray, reference: np.ndarray, track: PlacementTrack) -> float:
    """MSE outside the union of all frame boxes, over all frames/channels."""
    video = np.asarray(video, float)
    reference = np.asarray(reference, float)
    if video.shape != reference.shape:
        raise ValueError(f"video {video.shape} and reference {reference.shape} differ")
    outside = ~_pixel_union(track)
    if not outside.any():
        return 0.0
    diff = (video - reference) ** 2
    return float(diff[:, outside, :].mean())


def reconstruction_mse(video: np.ndarray, target: np.ndarray) -> float:
    video = np.asarray(video, float)
    target = np.asarray(target, float)
    if video.shape != target.shape:
        raise ValueError(f"video {video.shape} and target {target.shape} differ")
    return float(((video - target) ** 2).mean())


def motion_correlation(video: np.ndarray, env: np.ndarray, silhouettes: np.ndarray,
                       track: PlacementTrack) -> float:
    """Pearson correlation between subject energy and the placed silhouette.

    The canonical silhouette is box-resampled into each frame's bbox
    (zero elsewhere) and correlated with the |video - env| energy over
    the union region.  Frames with absent boxes are skipped; returns 0
    when nothing can be scored or a signal is constant.
    """
    from .world import _area_weights  # box-filter resampler shared with the oracle

    video = np.asarray(video, float)
    env = np.asarray(env, float)
    union = _pixel_union(track)
    if not union.any():
        return 0.0
    h_c, w_c = silhouettes.shape[1:3]
    vals_e, vals_s = [], []
    for t, box in enumerate(track.boxes):
        if box is None:
            continue
        energy = np.abs(video[t] - env[t]).sum(axis=-1)
        placed = np.zeros_like(energy)
        wy = _area_weights((box.y2 - box.y1) * track.patch, h_c)
        wx = _area_weights((box.x2 - box.x1) * track.patch, w_c)
        placed[
            box.y1 * track.patch : box.y2 * track.patch,
            box.x1 * track.patch : box.x2 * track.patch,
        ] = wy @ silhouettes[t] @ wx.T
        vals_e.append(energy[union])
        vals_s.append(placed[union])
    if not vals_e:
        return 0.0
    e = np.concatenate(vals_e)
    s = np.concatenate(vals_s)
    if e.std() < 1e-12 or s.std() < 1e-12:
        return 0.0
    return float(np.corrcoef(e, s)[0, 1])


def revisit_drift(video: np.ndarray, track: PlacementTrack,
                  frame_a: int = 0, frame_b: int = -1) -> float:
    """Background MSE between two pose-matched frames of one video."""
    video = np.asarray(video, float)
    outside = ~_pixel_union(track)
    if not outside.any():
        return 0.0
    diff = (video[frame_a] - video[frame_b]) ** 2
    return float(diff[outside, :].mean())


@dataclass(eq=False)
class EvalReport:
    """Metric bundle with pass/fail against thresholds.

    thresholds maps metric name -> (bound, direction) with direction
    "max" (value must be <= bound) or "min" (value must be >= bound).
    """

    protocol: str
    metrics: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.metrics.items():
            if not np.isfinite(value):
                raise ValueError(f"metric {name!r} is not finite: {value}")

    def passes(self) -> dict:
        out = {}
        for name, (bound, direction) in self.thresholds.items():
            value = self.metrics[name]
            out[name] = value <= bound if direction == "max" else value >= bound
        return out

    def all_pass(self) -> bool:
        return all(self.passes().values())

    def table(self) -> str:
        """Human-readable fixed-width table; deterministic formatting."""
        lines = [f"protocol: {self.protocol}", "-" * 58]
        checks = self.passes()
        for name in sorted(self.metrics):
            value = f"{self.metrics[name]:.6g}"
            if name in self.thresholds:
                bound, direction = self.thresholds[name]
                op = "<=" if direction == "max" else ">="
                status = "pass" if checks[name] else "FAIL"
                lines.append(f"{name:<28} {value:>12}  {op} {bound:<8g} {status}")
            else:
                lines.append(f"{name:<28} {value:>12}")
        return "\n".join(lines)

    def to_kv(self) -> str:
        """Machine-readable key = value lines (diffable, sorted)."""
        lines = [f"protocol = {self.protocol}"]
        for name in sorted(self.metrics):
            lines.append(f"{name} = {self.metrics[name]:.12g}")
        for name in sorted(self.thresholds):
            bound, direction = self.thresholds[name]
            lines.append(f"threshold.{name} = {bound:.12g} {direction}")
        for name, ok in sorted(self.passes().items()):
            lines.append(f"pass.{name} = {'true' if ok else 'false'}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_kv())

    @classmethod
    def load(cls, path) -> "EvalReport":
        protocol = None
        metrics, thresholds = {}, {}
        with open(path) as fh:
            for raw in fh:
                line = raw.strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if key == "protocol":
                    protocol = value
                elif key.startswith("threshold."):
                    bound, direction = value.split()
                    thresholds[key[len("threshold."):]] = (float(bound), direction)
                elif not key.startswith("pass."):
                    metrics[key] = float(value)
        if protocol is None:
            raise ValueError(f"{path}: missing protocol line")
        return cls(protocol=protocol, metrics=metrics, thresholds=thresholds)


def report_equal(a: EvalReport, b: EvalReport) -> bool:
    return a.to_kv() == b.to_kv()
