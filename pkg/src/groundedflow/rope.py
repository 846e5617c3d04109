"""Rotary position embeddings over (t, x, y) and their bbox grounding.

A head vector is split into three contiguous channel groups, one per
axis.  Within a group of size d, channels (i, i + d/2) form a rotation
pair driven by angle ``coordinate * base**(-2i/d)``.  Attention logits
between vectors rotated this way depend only on coordinate differences,
which is what makes the grounding below work: queries inside a subject
bbox are rotated at coordinates rescaled into the canonical motion-map
frame, so a query lands on the same spatial angle as the canonical key
it should attend to, regardless of how large the subject appears on
screen.  Queries outside every bbox share one large background
coordinate and therefore one rotation.

Angles and trigonometry are evaluated in double precision; results are
cast down only when applied to lower-precision activations.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import BBox, PlacementTrack

DEFAULT_BACKGROUND_LABEL = 1e4


@dataclass(frozen=True)
class RopeConfig:
    """Rotary embedding layout for one attention head.

    axis_split gives the channel counts (d_t, d_x, d_y); each must be
    even and positive and they must sum to head_dim.  The default
    assigns half the channels to time and a quarter to each spatial
    axis.  background_label is the coordinate given to queries outside
    every bbox; it must dwarf any attainable scaled grid coordinate.
    """

    head_dim: int
    base: float = 10000.0
    axis_split: tuple | None = None
    background_label: float = DEFAULT_BACKGROUND_LABEL

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"head_dim must be even and positive, got {self.head_dim}")
        if self.axis_split is not None:
            object.__setattr__(self, "axis_split", tuple(int(d) for d in self.axis_split))
        split = self.splits()
        if sum(split) != self.head_dim:
            raise ValueError(f"axis_split {split} does not sum to head_dim {self.head_dim}")
        if any(d <= 0 or d % 2 for d in split):
            raise ValueError(f"axis_split entries must be even and positive, got {split}")
        if self.base <= 1:
            raise ValueError(f"frequency base must exceed 1, got {self.base}")

    def splits(self) -> tuple:
        if self.axis_split is not None:
            return self.axis_split
        d_t = self.head_dim // 2
        if d_t % 2:
            d_t += 1
        d_x = (self.head_dim - d_t) // 2
        return (d_t, d_x, self.head_dim - d_t - d_x)


@dataclass(frozen=True)
class ScaleFactors:
    """Per-frame bbox-to-canonical scale factors (s_h, s_w)."""

    s_h: float
    s_w: float

    def __post_init__(self):
        if self.s_h <= 0 or self.s_w <= 0:
            raise ValueError(f"scale factors must be positive, got ({self.s_h}, {self.s_w})")


def scale_factors(bbox: BBox, h_c: int, w_c: int) -> ScaleFactors:
    """Scale factors mapping bbox token extents onto the canonical grid."""
    if bbox.height < 1 or bbox.width < 1:
        raise ValueError("bbox must span at least one token per side")
    return ScaleFactors(s_h=h_c / bbox.height, s_w=w_c / bbox.width)


@lru_cache(maxsize=None)
def _axis_frequencies(cfg: RopeConfig) -> tuple:
    """Per-axis rotation frequencies base**(-2k/d_axis), k < d_axis/2."""
    freqs = []
    for d in cfg.splits():
        k = np.arange(d // 2, dtype=np.float64)
        freqs.append(cfg.base ** (-2.0 * k / d))
    return tuple(freqs)


def rotation_tables(positions: np.ndarray, cfg: RopeConfig):
    """Cosine/sine tables for positions (..., 3) -> each (..., head_dim/2).

    Angle channels are laid out group-contiguously: d_t/2 temporal
    angles, then d_x/2, then d_y/2 spatial ones, matching the grouped
    channel pairing applied by the rotation helpers.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[-1] != 3:
        raise ValueError(f"positions must end in 3 coordinates, got {positions.shape}")
    freqs = _axis_frequencies(cfg)
    angles = np.concatenate(
        [positions[..., i : i + 1] * freqs[i] for i in range(3)], axis=-1
    )
    return np.cos(angles), np.sin(angles)


def _apply_grouped_rotation(x, cos, sin, splits, inverse=False):
    """Rotate paired channels (i, i + d/2) of each axis group of x."""
    if inverse:
        sin = -sin
    out = np.empty_like(x)
    ch = 0   # channel offset into x
    ang = 0  # angle offset into cos/sin
    for d in splits:
        half = d // 2
        a = x[..., ch : ch + half]
        b = x[..., ch + half : ch + d]
        c = cos[..., ang : ang + half]
        s = sin[..., ang : ang + half]
        out[..., ch : ch + half] = a * c - b * s
        out[..., ch + half : ch + d] = a * s + b * c
        ch += d
        ang += half
    return out


def rope_rotate(vec: np.ndarray, position, cfg: RopeConfig, inverse: bool = False) -> np.ndarray:
    """Rotate head vectors (..., head_dim) at positions (..., 3).

    Positions broadcast against the vector's leading dimensions.  The
    rotation preserves each vector's 2-norm, and dot products between
    rotated vectors depend only on coordinate differences.
    """
    vec = np.asarray(vec)
    if vec.shape[-1] != cfg.head_dim:
        raise ValueError(f"vector dim {vec.shape[-1]} != head_dim {cfg.head_dim}")
    cos, sin = rotation_tables(position, cfg)
    if vec.dtype != np.float64:
        cos = cos.astype(vec.dtype)
        sin = sin.astype(vec.dtype)
    return _apply_grouped_rotation(vec, cos, sin, cfg.splits(), inverse=inverse)


def grounded_coordinates(bbox: BBox, x, y, h_c: int, w_c: int):
    """Map grid coordinates into the canonical frame of a bbox.

    Returns (w_c * (x - x1) / width, h_c * (y - y1) / height).  The
    product-first evaluation makes corner correspondence exact: x = x1
    maps to exactly 0 and x = x2 to exactly w_c.
    """
    gx = w_c * (np.asarray(x, dtype=np.float64) - bbox.x1) / bbox.width
    gy = h_c * (np.asarray(y, dtype=np.float64) - bbox.y1) / bbox.height
    return gx, gy


def grounded_positions(
    track: PlacementTrack, h_c: int, w_c: int, cfg: RopeConfig
) -> np.ndarray:
    """Per-token rotation positions (T, grid_h, grid_w, 3) for video queries.

    Tokens inside frame t's bbox get (t, scaled x, scaled y) relative to
    the bbox origin; all other tokens of the frame share the background
    position (t, label, label).  Frames with an absent bbox are entirely
    background.
    """
    T = len(track)
    gh, gw = track.grid_h, track.grid_w
    alpha = cfg.background_label
    pos = np.empty((T, gh, gw, 3), dtype=np.float64)
    pos[..., 0] = np.arange(T, dtype=np.float64)[:, None, None]
    pos[..., 1] = alpha
    pos[..., 2] = alpha
    xs = np.arange(gw, dtype=np.float64)
    ys = np.arange(gh, dtype=np.float64)
    for t, box in enumerate(track.boxes):
        if box is None:
            continue
        gx, gy = grounded_coordinates(box, xs[box.x1 : box.x2], ys[box.y1 : box.y2], h_c, w_c)
        pos[t, box.y1 : box.y2, box.x1 : box.x2, 1] = gx[None, :]
        pos[t, box.y1 : box.y2, box.x1 : box.x2, 2] = gy[:, None]
    return pos


def canonical_positions(frames: int, h_c: int, w_c: int) -> np.ndarray:
    """Literal canonical-grid rotation positions (T, h_c, w_c, 3)."""
    pos = np.empty((frames, h_c, w_c, 3), dtype=np.float64)
    pos[..., 0] = np.arange(frames, dtype=np.float64)[:, None, None]
    pos[..., 1] = np.arange(w_c, dtype=np.float64)[None, None, :]
    pos[..., 2] = np.arange(h_c, dtype=np.float64)[None, :, None]
    return pos


def grounded_query_rope(
    q: np.ndarray,
    track: PlacementTrack,
    cfg: RopeConfig,
    h_c: int,
    w_c: int,
    inverse: bool = False,
) -> np.ndarray:
    """Rotate video-grid queries (T, grid_h, grid_w, ..., head_dim) by grounded positions.

    Trailing dimensions between the grid and head_dim (e.g. a heads axis)
    broadcast.  Queries outside the frame bbox, or in frames with no
    bbox, receive the shared background rotation.  ``inverse`` applies
    the transpose rotation, which is the vector-Jacobian product needed
    by backpropagation.
    """
    q = np.asarray(q)
    T, gh, gw = q.shape[0], q.shape[1], q.shape[2]
    if (T, gh, gw) != (len(track), track.grid_h, track.grid_w):
        raise ValueError(
            f"query grid {(T, gh, gw)} does not match track "
            f"{(len(track), track.grid_h, track.grid_w)}"
        )
    pos = grounded_positions(track, h_c, w_c, cfg)
    cos, sin = rotation_tables(pos, cfg)
    extra = q.ndim - 4
    if extra:
        shape = pos.shape[:3] + (1,) * extra + (cos.shape[-1],)
        cos = cos.reshape(shape)
        sin = sin.reshape(shape)
    if q.dtype != np.float64:
        cos = cos.astype(q.dtype)
        sin = sin.astype(q.dtype)
    return _apply_grouped_rotation(q, cos, sin, cfg.splits(), inverse=inverse)


def canonical_key_rope(k: np.ndarray, cfg: RopeConfig, inverse: bool = False) -> np.ndarray:
    """Rotate canonical-grid keys (T, h_c, w_c, ..., head_dim) at literal coordinates."""
    k = np.asarray(k)
    T, h_c, w_c = k.shape[0], k.shape[1], k.shape[2]
    pos = canonical_positions(T, h_c, w_c)
    cos, sin = rotation_tables(pos, cfg)
    extra = k.ndim - 4
    if extra:
        shape = pos.shape[:3] + (1,) * extra + (cos.shape[-1],)
        cos = cos.reshape(shape)
        sin = sin.reshape(shape)
    if k.dtype != np.float64:
        cos = cos.astype(k.dtype)
        sin = sin.astype(k.dtype)
    return _apply_grouped_rotation(k, cos, sin, cfg.splits(), inverse=inverse)
