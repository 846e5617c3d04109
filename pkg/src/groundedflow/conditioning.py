"""Conditioning context assembly, motion cross-attention, and memory retrieval.

The conditioning context is a temporal concatenation of three segments:
environment RGB-D renders (the synthesis targets), identity reference
frames, and optional memory frames retrieved from earlier generations.
A binary mask channel marks which frames are to be synthesized (1) as
opposed to preserved (0).  Motion enters separately, through a
cross-attention whose keys and values are projected from canonical
motion maps and whose queries are rotated by the bbox-grounded rotary
embedding, aligning on-screen subject tokens with canonical-frame
motion tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .geometry import BODY_OCCUPANCY, CameraPose, PlacementTrack
from .rope import RopeConfig, canonical_key_rope, grounded_query_rope


@dataclass(eq=False)
class CanonicalMotionSequence:
    """Motion rendered in the canonical frame: translation removed, fixed occupancy.

    maps: (T, h_c, w_c, C_u) in [0, 1]; three joint heat-map channels
    plus one silhouette channel at the default C_u = 4.
    root_offsets: (T, 3) per-frame root displacement relative to frame 0,
    in the frame-0 camera-anchored coordinate system.
    """

    maps: np.ndarray
    root_offsets: np.ndarray
    occupancy: float = BODY_OCCUPANCY

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        self.root_offsets = np.asarray(self.root_offsets, dtype=np.float64).reshape(-1, 3)
        if self.maps.ndim != 4:
            raise ValueError(f"maps must be (T, h_c, w_c, C_u), got {self.maps.shape}")
        if len(self.maps) != len(self.root_offsets):
            raise ValueError(
                f"{len(self.maps)} map frames but {len(self.root_offsets)} root offsets"
            )
        if self.maps.size and (self.maps.min() < 0 or self.maps.max() > 1):
            raise ValueError("motion map values must lie in [0, 1]")
        if self.occupancy != BODY_OCCUPANCY:
            raise ValueError(f"occupancy ratio is fixed at {BODY_OCCUPANCY}")

    def __len__(self) -> int:
        return len(self.maps)

    @property
    def canonical_size(self) -> tuple:
        return self.maps.shape[1], self.maps.shape[2]

    def save(self, basepath) -> None:
        fileio.save_raw_tensor(
            basepath,
            self.maps,
            meta={
                "kind": "motion",
                "root_offsets": [list(map(float, r)) for r in self.root_offsets],
                "occupancy": self.occupancy,
            },
        )

    @classmethod
    def load(cls, basepath) -> "CanonicalMotionSequence":
        maps, meta = fileio.load_raw_tensor(basepath)
        return cls(maps=maps, root_offsets=np.array(meta["root_offsets"]))


@dataclass(eq=False)
class ConditionSet:
    """The conditioning bundle for one clip.

    env: T rendered RgbdFrames (the scene the video plays in).
    motion: canonical motion maps, or None to disable motion injection.
    identity: (T_id, H, W, 3) subject reference frames on neutral ground.
    mask: (T, H, W) binary; 1 = synthesize, 0 = preserve.
    memory: optional (T_mem, H, W, 4) frames from earlier generations.
    memory_times: which video timestep each memory frame serves; the
        frame is embedded at that temporal position so reading it reuses
        the zero-offset attention path.  Defaults to 0..T_mem-1 (frames
        taken from the start of a clip serve their own timestep).
    keep: optional (T, H, W, C) content preserved where mask is 0.
    global_token: optional (D,) conditioning vector added to all tokens.
    """

    env: list
    motion: "CanonicalMotionSequence | None"
    identity: np.ndarray
    mask: np.ndarray
    memory: np.ndarray | None = None
    memory_times: np.ndarray | None = None
    keep: np.ndarray | None = None
    global_token: np.ndarray | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.identity = np.asarray(self.identity, dtype=np.float64)
        if self.mask.ndim != 3:
            raise ValueError(f"mask must be (T, H, W), got {self.mask.shape}")
        if len(self.env) != self.mask.shape[0]:
            raise ValueError(
                f"{len(self.env)} env frames but mask covers {self.mask.shape[0]}"
            )
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        if self.identity.ndim != 4 or self.identity.shape[-1] != 3:
            raise ValueError(f"identity must be (T_id, H, W, 3), got {self.identity.shape}")
        if self.memory_times is not None:
            T = len(self.env)
            times = np.asarray(self.memory_times, dtype=np.int64)
            n_mem = 0 if self.memory is None else len(self.memory)
            if times.shape != (n_mem,):
                raise ValueError(
                    f"memory_times covers {times.shape} frames, memory has {n_mem}"
                )
            if n_mem and (times.min() < 0 or times.max() >= T):
                raise ValueError(
                    f"memory_times must lie in [0, {T}), got {times.tolist()}"
                )
            self.memory_times = times


@dataclass(eq=False)
class ContextSequence:
    """Assembled conditioning tokens: (T + T_id + T_mem, H, W, 4 + C + 1).

    Per-frame channels are [appearance rgbd | preserved latent | mask].
    ``labels`` tags every frame 'env', 'id', or 'mem'; the first
    ``video_frames`` frames are the synthesis targets.  ``frame_times``
    holds each frame's temporal embedding position (memory frames sit at
    the timestep they serve); None means sequential 0..total-1.
    """

    tokens: np.ndarray
    labels: tuple
    video_frames: int
    frame_times: np.ndarray | None = None

    def __post_init__(self):
        if self.tokens.shape[0] != len(self.labels):
            raise ValueError(
                f"{self.tokens.shape[0]} token frames but {len(self.labels)} labels"
            )
        if self.frame_times is not None:
            times = np.asarray(self.frame_times, dtype=np.int64)
            if times.shape != (self.tokens.shape[0],):
                raise ValueError(
                    f"frame_times covers {times.shape}, tokens have "
                    f"{self.tokens.shape[0]} frames"
                )
            self.frame_times = times

    def segment_lengths(self) -> dict:
        counts = {"env": 0, "id": 0, "mem": 0}
        for label in self.labels:
            counts[label] += 1
        return counts

    def save(self, basepath) -> None:
        meta = {"kind": "context", "labels": list(self.labels),
                "video_frames": self.video_frames}
        if self.frame_times is not None:
            meta["frame_times"] = self.frame_times.tolist()
        fileio.save_raw_tensor(basepath, self.tokens, meta=meta)

    @classmethod
    def load(cls, basepath) -> "ContextSequence":
        tokens, meta = fileio.load_raw_tensor(basepath)
        times = meta.get("frame_times")
        return cls(tokens=tokens, labels=tuple(meta["labels"]),
                   video_frames=int(meta["video_frames"]),
                   frame_times=None if times is None else np.asarray(times))


def assemble_context(cond: ConditionSet, latent_channels: int = 4) -> ContextSequence:
    """Concatenate env, identity, and memory segments with the mask channel.

    Environment frames carry their RGB-D appearance, the preserved latent
    content, and the per-pixel mask.  Identity frames carry RGB with a
    zero depth slot, memory frames their stored RGB-D; both are never
    synthesis targets, so their keep channels and mask are zero.
    """
    T = len(cond.env)
    h, w = cond.env[0].rgb.shape[:2]
    c = latent_channels
    keep = cond.keep if cond.keep is not None else np.zeros((T, h, w, c))
    keep = np.asarray(keep, dtype=np.float64)
    if keep.shape != (T, h, w, c):
        raise ValueError(f"keep must be {(T, h, w, c)}, got {keep.shape}")

    segments, labels = [], []
    env_tokens = np.concatenate(
        [
            np.stack([f.stack() for f in cond.env]),
            keep,
            cond.mask[..., None],
        ],
        axis=-1,
    )
    segments.append(env_tokens)
    labels += ["env"] * T

    t_id = cond.identity.shape[0]
    if cond.identity.shape[1:3] != (h, w):
        raise ValueError(
            f"identity frames are {cond.identity.shape[1:3]}, expected {(h, w)}"
        )
    id_tokens = np.zeros((t_id, h, w, 4 + c + 1))
    id_tokens[..., :3] = cond.identity
    segments.append(id_tokens)
    labels += ["id"] * t_id

    times = [np.arange(T + t_id, dtype=np.int64)]
    if cond.memory is not None and len(cond.memory):
        mem = np.asarray(cond.memory, dtype=np.float64)
        if mem.shape[1:] != (h, w, 4):
            raise ValueError(f"memory frames must be (*, {h}, {w}, 4), got {mem.shape}")
        mem_tokens = np.zeros((mem.shape[0], h, w, 4 + c + 1))
        mem_tokens[..., :4] = mem
        segments.append(mem_tokens)
        labels += ["mem"] * mem.shape[0]
        # Memory frames are embedded at the timestep they serve so the
        # zero-offset (same time, same pixel) attention path reads them.
        if cond.memory_times is not None:
            times.append(cond.memory_times)
        else:
            times.append(np.arange(mem.shape[0], dtype=np.int64))

    return ContextSequence(
        tokens=np.concatenate(segments, axis=0), labels=tuple(labels),
        video_frames=T, frame_times=np.concatenate(times),
    )


def encode_segment(frames: np.ndarray, weight: np.ndarray, bias: np.ndarray, patch: int = 1) -> np.ndarray:
    """Patchify frames (N, H, W, C) and embed each patch linearly.

    A patch is flattened in (dy, dx, channel) order to a vector of
    length patch*patch*C and mapped through ``weight`` (D, patch*patch*C)
    plus ``bias`` (D).  Output is (N, H/patch, W/patch, D).
    """
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError(f"frames must be (N, H, W, C), got {frames.shape}")
    n, h, w, c = frames.shape
    if h % patch or w % patch:
        raise ValueError(f"grid {h}x{w} not divisible by patch size {patch}")
    if weight.shape[1] != patch * patch * c:
        raise ValueError(
            f"embedding expects {weight.shape[1]} patch channels, got {patch * patch * c}"
        )
    hp, wp = h // patch, w // patch
    patches = (
        frames.reshape(n, hp, patch, wp, patch, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, hp, wp, patch * patch * c)
    )
    return patches @ weight.T + bias


def scaled_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Softmax attention over the last two axes; leading axes broadcast.

    q: (..., Nq, d), k/v: (..., Nk, d).  Returns (out, probs) with probs
    kept for the backward pass.  Logits are scaled by 1/sqrt(d) and
    max-shifted per row for stability.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[:-1] != k.shape[:-1]:
        raise ValueError(
            f"incompatible attention shapes q{q.shape} k{k.shape} v{v.shape}"
        )
    logits = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(d)
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits @ v, logits


def scaled_attention_backward(g_out: np.ndarray, q, k, v, probs):
    """Gradients of scaled_attention w.r.t. q, k, v."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    g_v = np.swapaxes(probs, -1, -2) @ g_out
    g_p = g_out @ np.swapaxes(v, -1, -2)
    tmp = g_p * probs
    g_logits = tmp - probs * tmp.sum(axis=-1, keepdims=True)
    g_q = (g_logits @ k) * scale
    g_k = (np.swapaxes(g_logits, -1, -2) @ q) * scale
    return g_q, g_k, g_v


@dataclass(eq=False)
class MotionWeights:
    """Projections of the motion cross-attention.

    Keys and values are projected straight from the C_u motion-map
    channels (the projections double as the motion embedding); the
    output projection starts at zero so a fresh module is a no-op.
    """

    key_w: np.ndarray    # (D, C_u)
    key_b: np.ndarray    # (D,)
    value_w: np.ndarray  # (D, C_u)
    value_b: np.ndarray  # (D,)
    out_w: np.ndarray    # (D, D)
    heads: int = 1

    def __post_init__(self):
        d = self.key_w.shape[0]
        if d % self.heads:
            raise ValueError(f"dim {d} not divisible by {self.heads} heads")


def _inbox_mask(track: PlacementTrack) -> np.ndarray:
    mask = np.zeros((len(track), track.grid_h, track.grid_w))
    for t, box in enumerate(track.boxes):
        if box is not None:
            mask[t, box.y1 : box.y2, box.x1 : box.x2] = 1.0
    return mask


def motion_cross_attention(
    queries: np.ndarray,
    motion: CanonicalMotionSequence,
    track: PlacementTrack,
    cfg: RopeConfig,
    weights: MotionWeights,
    mask_background: bool = False,
    want_cache: bool = False,
):
    """Per-frame cross-attention from video tokens to canonical motion tokens.

    queries: (T, grid_h, grid_w, D) video-token features.  Keys/values
    are projected from the frame's motion map; queries are rotated by
    the grounded rope, keys at literal canonical coordinates, and the
    per-head softmax(QK^T / sqrt(d)) V outputs are concatenated and
    output-projected into an additive residual.  With mask_background
    the residual is zeroed outside each frame's bbox instead of letting
    background tokens attend through the shared background rotation.
    """
    queries = np.asarray(queries)
    T, gh, gw, dim = queries.shape
    if len(motion) != T:
        raise ValueError(f"{T} query frames but {len(motion)} motion frames")
    if len(track) != T:
        raise ValueError(f"{T} query frames but track covers {len(track)}")
    heads = weights.heads
    hd = dim // heads
    if hd != cfg.head_dim:
        raise ValueError(f"per-head dim {hd} != rope head_dim {cfg.head_dim}")
    h_c, w_c = motion.canonical_size
    dtype = queries.dtype
    maps = motion.maps.astype(dtype)

    k_raw = maps @ weights.key_w.T.astype(dtype) + weights.key_b.astype(dtype)
    v_raw = maps @ weights.value_w.T.astype(dtype) + weights.value_b.astype(dtype)

    q4 = queries.reshape(T, gh, gw, heads, hd)
    k4 = k_raw.reshape(T, h_c, w_c, heads, hd)
    q_rot = grounded_query_rope(q4, track, cfg, h_c, w_c)
    k_rot = canonical_key_rope(k4, cfg)

    qh = q_rot.reshape(T, gh * gw, heads, hd).transpose(0, 2, 1, 3)
    kh = k_rot.reshape(T, h_c * w_c, heads, hd).transpose(0, 2, 1, 3)
    vh = v_raw.reshape(T, h_c * w_c, heads, hd).transpose(0, 2, 1, 3)

    out, probs = scaled_attention(qh, kh, vh)
    cat = out.transpose(0, 2, 1, 3).reshape(T, gh, gw, dim)
    residual = cat @ weights.out_w.T.astype(dtype)

    inbox = None
    if mask_background:
        inbox = _inbox_mask(track).astype(dtype)
        residual = residual * inbox[..., None]

    if not want_cache:
        return residual
    cache = (qh, kh, vh, probs, cat, maps, inbox, track, cfg, weights, (h_c, w_c))
    return residual, cache


def motion_cross_attention_backward(g_residual: np.ndarray, cache):
    """Gradients w.r.t. queries and every motion weight."""
    qh, kh, vh, probs, cat, maps, inbox, track, cfg, weights, (h_c, w_c) = cache
    T, heads, nq, hd = qh.shape
    dim = heads * hd
    gh_, gw_ = track.grid_h, track.grid_w
    dtype = g_residual.dtype

    if inbox is not None:
        g_residual = g_residual * inbox[..., None]

    g_flat = g_residual.reshape(-1, dim)
    g_out_w = g_flat.T @ cat.reshape(-1, dim)
    g_cat = g_residual @ weights.out_w.astype(dtype)

    g_outh = g_cat.reshape(T, nq, heads, hd).transpose(0, 2, 1, 3)
    g_qh, g_kh, g_vh = scaled_attention_backward(g_outh, qh, kh, vh, probs)

    g_qrot = g_qh.transpose(0, 2, 1, 3).reshape(T, gh_, gw_, heads, hd)
    g_krot = g_kh.transpose(0, 2, 1, 3).reshape(T, h_c, w_c, heads, hd)
    g_v = g_vh.transpose(0, 2, 1, 3).reshape(T, h_c, w_c, dim)

    g_q4 = grounded_query_rope(g_qrot, track, cfg, h_c, w_c, inverse=True)
    g_queries = g_q4.reshape(T, gh_, gw_, dim)
    g_k_raw = canonical_key_rope(g_krot, cfg, inverse=True).reshape(T, h_c, w_c, dim)

    maps_flat = maps.reshape(-1, maps.shape[-1])
    gk_flat = g_k_raw.reshape(-1, dim)
    gv_flat = g_v.reshape(-1, dim)
    grads = {
        "key_w": gk_flat.T @ maps_flat,
        "key_b": gk_flat.sum(axis=0),
        "value_w": gv_flat.T @ maps_flat,
        "value_b": gv_flat.sum(axis=0),
        "out_w": g_out_w,
    }
    return g_queries, grads


@dataclass(eq=False)
class MemoryEntry:
    frame: np.ndarray  # (H, W, C)
    pose: CameraPose
    step: int


@dataclass(eq=False)
class MemoryBank:
    """Bounded store of generated frames with their camera poses.

    sigma_pos sets the positional similarity falloff; a natural choice
    is a quarter of the scene diameter.  Entries stay sorted by step,
    and the oldest entries are evicted beyond capacity.
    """

    capacity: int
    sigma_pos: float
    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def update_memory(bank: MemoryBank, frame: np.ndarray, pose: CameraPose, step: int) -> MemoryBank:
    """Insert a generated frame; evict the oldest entry beyond capacity."""
    entry = MemoryEntry(frame=np.asarray(frame), pose=pose, step=step)
    at = len(bank.entries)
    while at > 0 and bank.entries[at - 1].step > step:
        at -= 1
    bank.entries.insert(at, entry)
    while len(bank.entries) > bank.capacity:
        bank.entries.pop(0)
    return bank


def memory_score(entry: MemoryEntry, pose: CameraPose, sigma_pos: float) -> float:
    """Viewpoint similarity: positional proximity times view-direction agreement."""
    dist = float(np.linalg.norm(entry.pose.camera_center() - pose.camera_center()))
    cos = float(entry.pose.optical_axis() @ pose.optical_axis())
    return float(np.exp(-dist / sigma_pos) * max(0.0, cos))


def retrieve_memory(bank: MemoryBank, pose: CameraPose, k: int) -> list:
    """Top-k bank entries by viewpoint similarity; ties favor earlier steps."""
    if k < 0:
        raise ValueError(f"retrieval count must be >= 0, got {k}")
    scored = [
        (memory_score(entry, pose, bank.sigma_pos), entry.step, i)
        for i, entry in enumerate(bank.entries)
    ]
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [bank.entries[i] for _, _, i in scored[:k]]
