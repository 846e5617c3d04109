"""Velocity-predictor transformer with frozen base and trainable add-ons.

The architecture mirrors the adapted-foundation-model pattern at desk
scale: a randomly initialized, frozen transformer plays the base video
model; low-rank adapters on its linear layers and per-block motion
cross-attention modules are the only trainable weights.  Both start as
exact no-ops (adapter up-projections and motion output projections are
zero), so the freshly conditioned model is bit-identical to the base.

The base output head is zero and frozen, with a trainable low-rank
adapter on top: the initial model therefore predicts exactly zero
velocity, which keeps the no-op contract meaningful and the step-0
training loss analytically known.  Because regressing velocity near
t = 0 requires gain ~ 1/t, the head output is divided by max(t,
time_floor) (the network itself regresses the well-conditioned
quantity t * v).

Forward and backward passes are written out explicitly for this fixed
architecture; no autodiff is involved, and gradients are validated
against finite differences in the test suite.  Self-attention streams
over query chunks so no (S, S) matrix is ever materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .conditioning import (
    ContextSequence,
    MotionWeights,
    encode_segment,
    motion_cross_attention,
    motion_cross_attention_backward,
)
from .geometry import BBox, PlacementTrack
from .rope import RopeConfig, canonical_positions, rotation_tables, _apply_grouped_rotation

LN_EPS = 1e-5
ATTN_CHUNK = 512
_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

ADAPTER_TARGETS = ("q", "k", "v", "o", "ffn1", "ffn2", "head")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the desk-scale setup."""

    dim: int = 64
    heads: int = 4
    blocks: int = 2
    patch: int = 1
    grid_h: int = 24
    grid_w: int = 24
    canon_h: int = 12
    canon_w: int = 12
    latent_channels: int = 4
    motion_channels: int = 4
    adapter_rank: int = 4
    adapter_targets: tuple = ADAPTER_TARGETS
    ffn_mult: int = 4
    rope_base: float = 10000.0
    rope_axis_split: tuple | None = None
    rope_background: float = 1e4
    mask_background: bool = False
    time_floor: float = 0.05
    dtype: str = "float32"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.adapter_rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {self.adapter_rank}")
        object.__setattr__(self, "adapter_targets", tuple(self.adapter_targets))
        unknown = set(self.adapter_targets) - set(ADAPTER_TARGETS)
        if unknown:
            raise ValueError(f"unknown adapter targets {sorted(unknown)}")
        if self.grid_h % self.patch or self.grid_w % self.patch:
            raise ValueError("pixel grid must divide evenly into patches")
        self.rope_config()  # validate the split eagerly

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def token_h(self) -> int:
        return self.grid_h // self.patch

    @property
    def token_w(self) -> int:
        return self.grid_w // self.patch

    @property
    def input_channels(self) -> int:
        # latent slot + rgbd appearance + preserved latent + mask channel
        return self.latent_channels + 4 + self.latent_channels + 1

    def rope_config(self) -> RopeConfig:
        return RopeConfig(
            head_dim=self.head_dim,
            base=self.rope_base,
            axis_split=self.rope_axis_split,
            background_label=self.rope_background,
        )

    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim, "heads": self.heads, "blocks": self.blocks,
            "patch": self.patch, "grid_h": self.grid_h, "grid_w": self.grid_w,
            "canon_h": self.canon_h, "canon_w": self.canon_w,
            "latent_channels": self.latent_channels,
            "motion_channels": self.motion_channels,
            "adapter_rank": self.adapter_rank,
            "adapter_targets": list(self.adapter_targets),
            "ffn_mult": self.ffn_mult, "rope_base": self.rope_base,
            "rope_axis_split": list(self.rope_axis_split) if self.rope_axis_split else None,
            "rope_background": self.rope_background,
            "mask_background": self.mask_background,
            "time_floor": self.time_floor, "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("adapter_targets") is not None:
            d["adapter_targets"] = tuple(d["adapter_targets"])
        if d.get("rope_axis_split") is not None:
            d["rope_axis_split"] = tuple(d["rope_axis_split"])
        return cls(**d)


@dataclass(eq=False)
class LowRankAdapter:
    """Rank-r update for a frozen linear layer: y = W x + up @ (down @ x)."""

    down: np.ndarray  # (r, fan_in)
    up: np.ndarray    # (fan_out, r)
    layer_id: str = ""

    def __post_init__(self):
        if self.down.shape[0] != self.up.shape[1]:
            raise ValueError(
                f"rank mismatch: down is {self.down.shape}, up is {self.up.shape}"
            )


def apply_adapter(x: np.ndarray, base_weight: np.ndarray, adapter: LowRankAdapter,
                  bias: np.ndarray | None = None) -> np.ndarray:
    """Adapted linear map on row vectors: x @ W.T + (x @ A.T) @ B.T (+ bias)."""
    if base_weight.shape[1] != x.shape[-1]:
        raise ValueError(
            f"input dim {x.shape[-1]} does not match weight {base_weight.shape}"
        )
    if adapter.down.shape[1] != x.shape[-1] or adapter.up.shape[0] != base_weight.shape[0]:
        raise ValueError(
            f"adapter {adapter.down.shape}/{adapter.up.shape} does not fit "
            f"weight {base_weight.shape}"
        )
    y = x @ base_weight.T + (x @ adapter.down.T) @ adapter.up.T
    if bias is not None:
        y = y + bias
    return y


def time_embedding(t: float, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal embedding of a scalar flow time in [0, 1]."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = 1000.0 * t * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)])
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(1)])
    return emb.astype(dtype)


def _layernorm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _layernorm_backward(g, cache, gamma, want_param_grads=False):
    xhat, inv = cache
    gxhat = g * gamma
    mean1 = gxhat.mean(axis=-1, keepdims=True)
    mean2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
    gx = inv * (gxhat - mean1 - xhat * mean2)
    if not want_param_grads:
        return gx, None, None
    axes = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)


def _gelu(x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    return x * cdf, cdf


def _gelu_backward(g, x, cdf):
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return g * (cdf + x * pdf)


def _attention_head(q, k, v, chunk=ATTN_CHUNK):
    """Streaming softmax attention for one head; never forms (S, S)."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    out = np.empty_like(q)
    n = q.shape[0]
    for i in range(0, n, chunk):
        logits = q[i : i + chunk] @ k.T
        logits *= scale
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        out[i : i + chunk] = logits @ v
    return out


def _attention_head_backward(g_out, q, k, v, chunk=ATTN_CHUNK):
    """Recompute attention probabilities chunk-wise and backpropagate."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    g_q = np.empty_like(q)
    g_k = np.zeros_like(k)
    g_v = np.zeros_like(v)
    n = q.shape[0]
    for i in range(0, n, chunk):
        qc = q[i : i + chunk]
        probs = qc @ k.T
        probs *= scale
        probs -= probs.max(axis=1, keepdims=True)
        np.exp(probs, out=probs)
        probs /= probs.sum(axis=1, keepdims=True)
        goc = g_out[i : i + chunk]
        g_v += probs.T @ goc
        g_p = goc @ v.T
        g_p *= probs
        g_p -= probs * g_p.sum(axis=1, keepdims=True)
        g_q[i : i + chunk] = (g_p @ k) * scale
        g_k += (g_p.T @ qc) * scale
    return g_q, g_k, g_v


class ToyModel:
    """Frozen random transformer + trainable adapters and motion modules.

    Parameters live in a flat name->array dict.  Names starting with
    "adapter." or "motion." are trainable; everything else is base and
    never receives gradients.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict = {}
        self._table_cache: dict = {}
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7])))
        dt = cfg.np_dtype()

        def normal(shape, fan_in):
            return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dt)

        d, r = cfg.dim, cfg.adapter_rank
        p2c_in = cfg.patch * cfg.patch * cfg.input_channels
        p2c_out = cfg.patch * cfg.patch * cfg.latent_channels
        hidden = cfg.ffn_mult * d

        self.params["embed.w"] = normal((d, p2c_in), p2c_in)
        self.params["embed.b"] = np.zeros(d, dt)
        for i in range(cfg.blocks):
            pre = f"block{i}."
            for ln in ("ln1", "ln2"):
                self.params[pre + ln + ".g"] = np.ones(d, dt)
                self.params[pre + ln + ".b"] = np.zeros(d, dt)
            for proj in ("q", "k", "v", "o"):
                self.params[pre + f"attn.{proj}.w"] = normal((d, d), d)
                self.params[pre + f"attn.{proj}.b"] = np.zeros(d, dt)
            self.params[pre + "ffn1.w"] = normal((hidden, d), d)
            self.params[pre + "ffn1.b"] = np.zeros(hidden, dt)
            self.params[pre + "ffn2.w"] = normal((d, hidden), hidden)
            self.params[pre + "ffn2.b"] = np.zeros(d, dt)
        self.params["final.ln.g"] = np.ones(d, dt)
        self.params["final.ln.b"] = np.zeros(d, dt)
        # Zero, frozen head: the base model predicts zero velocity, and
        # only the head adapter can move the output.
        self.params["final.head.w"] = np.zeros((p2c_out, d), dt)
        self.params["final.head.b"] = np.zeros(p2c_out, dt)

        fans = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
                "ffn1": (d, hidden), "ffn2": (hidden, d)}
        for i in range(cfg.blocks):
            for tgt in cfg.adapter_targets:
                if tgt == "head":
                    continue
                fan_in, fan_out = fans[tgt]
                self.params[f"adapter.block{i}.{tgt}.a"] = normal((r, fan_in), fan_in)
                self.params[f"adapter.block{i}.{tgt}.b"] = np.zeros((fan_out, r), dt)
        if "head" in cfg.adapter_targets:
            self.params["adapter.head.a"] = normal((r, d), d)
            self.params["adapter.head.b"] = np.zeros((p2c_out, r), dt)

        cu = cfg.motion_channels
        for i in range(cfg.blocks):
            pre = f"motion.block{i}."
            self.params[pre + "lnq.g"] = np.ones(d, dt)
            self.params[pre + "lnq.b"] = np.zeros(d, dt)
            self.params[pre + "q.w"] = normal((d, d), d)
            self.params[pre + "q.b"] = np.zeros(d, dt)
            self.params[pre + "key.w"] = normal((d, cu), cu)
            self.params[pre + "key.b"] = np.zeros(d, dt)
            self.params[pre + "value.w"] = normal((d, cu), cu)
            self.params[pre + "value.b"] = np.zeros(d, dt)
            self.params[pre + "out.w"] = np.zeros((d, d), dt)

    # ---------------------------------------------------------------- helpers

    def base_parameter_names(self) -> list:
        return [n for n in self.params if not n.startswith(("adapter.", "motion."))]

    def trainable_parameters(self) -> dict:
        """Exactly the adapter and motion weights, in stable name order."""
        return {
            n: self.params[n]
            for n in self.params
            if n.startswith(("adapter.", "motion."))
        }

    def parameter_groups(self) -> dict:
        """Learning-rate groups: adapters vs. motion modules."""
        names = list(self.trainable_parameters())
        return {
            "adapters": [n for n in names if n.startswith("adapter.")],
            "motion": [n for n in names if n.startswith("motion.")],
        }

    def trainable_count(self) -> int:
        return sum(p.size for p in self.trainable_parameters().values())

    def adapter_parameter_count(self) -> int:
        """Closed-form count of adapter weights (motion modules excluded).

        Each adapted layer contributes r * (fan_in + fan_out): the q/k/v/o
        projections are D -> D so each adds 2*D*r per block, ffn1/ffn2 are
        D -> mult*D and back so each adds (mult+1)*D*r per block, and the
        head adapter adds r * (D + patch^2 * C) once.  With rank 1 and
        targets q,k,v,o this reduces to blocks * 4 * 2 * D.
        """
        cfg = self.cfg
        d, r = cfg.dim, cfg.adapter_rank
        per_block = 0
        for tgt in cfg.adapter_targets:
            if tgt in ("q", "k", "v", "o"):
                per_block += 2 * d * r
            elif tgt in ("ffn1", "ffn2"):
                per_block += (cfg.ffn_mult + 1) * d * r
        count = cfg.blocks * per_block
        if "head" in cfg.adapter_targets:
            count += r * (d + cfg.patch * cfg.patch * cfg.latent_channels)
        return count

    def base_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.base_parameter_names()):
            arr = np.ascontiguousarray(self.params[name])
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def zero_conditioning(self) -> None:
        """Reset adapter up-projections and motion output projections to zero."""
        for name, arr in self.params.items():
            if name.startswith("adapter.") and name.endswith(".b") and arr.ndim == 2:
                arr[:] = 0
            if name.startswith("motion.") and name.endswith("out.w"):
                arr[:] = 0

    def _tables(self, frame_times: np.ndarray, dtype):
        key = (frame_times.tobytes(), np.dtype(dtype).str)
        if key not in self._table_cache:
            pos = canonical_positions(len(frame_times), self.cfg.token_h, self.cfg.token_w)
            pos[..., 0] = frame_times[:, None, None]
            cos, sin = rotation_tables(pos.reshape(-1, 3), self.cfg.rope_config())
            self._table_cache[key] = (cos.astype(dtype), sin.astype(dtype))
        return self._table_cache[key]

    def _lora(self, x, base_name, adapter_key, cache):
        """Linear layer with optional adapter; caches what backward needs."""
        w = self.params[base_name + ".w"]
        b = self.params[base_name + ".b"]
        y = x @ w.T + b
        entry = {"x": x, "w": w}
        if adapter_key is not None and f"adapter.{adapter_key}.a" in self.params:
            a = self.params[f"adapter.{adapter_key}.a"]
            up = self.params[f"adapter.{adapter_key}.b"]
            u = x @ a.T
            y += u @ up.T
            entry.update(u=u, a=a, up=up, key=adapter_key)
        cache.append(entry)
        return y

    @staticmethod
    def _lora_backward(g, entry, grads):
        gx = g @ entry["w"]
        if "a" in entry:
            gu = g @ entry["up"]
            gx += gu @ entry["a"]
            gmat = g.reshape(-1, g.shape[-1])
            key = entry["key"]
            grads[f"adapter.{key}.b"] = gmat.T @ entry["u"].reshape(-1, entry["u"].shape[-1])
            grads[f"adapter.{key}.a"] = gu.reshape(-1, gu.shape[-1]).T @ entry["x"].reshape(
                -1, entry["x"].shape[-1]
            )
        return gx

    # ---------------------------------------------------------------- forward

    def forward(self, z_t, t: float, context: ContextSequence, motion=None,
                track: PlacementTrack | None = None, global_token=None,
                want_cache: bool = False):
        """Predict velocity over the video frames.

        z_t: (T, H, W, C) interpolant, or (B, T, H, W, C) to run a batch
        sample-by-sample (context/motion/track may then be lists).
        Motion injection happens only when both motion and track are
        given; scene-only operation passes motion=None.
        """
        if np.ndim(z_t) == 5:
            if want_cache:
                raise ValueError("caching gradients is per-sample; batch is forward-only")
            batch = len(z_t)

            def pick(arg, b):
                return arg[b] if isinstance(arg, (list, tuple)) else arg

            return np.stack(
                [
                    self.forward(
                        z_t[b], t, pick(context, b), pick(motion, b),
                        pick(track, b), pick(global_token, b),
                    )
                    for b in range(batch)
                ]
            )

        cfg = self.cfg
        dt = cfg.np_dtype()
        z_t = np.asarray(z_t, dtype=dt)
        T = context.video_frames
        h_px, w_px, c = cfg.grid_h, cfg.grid_w, cfg.latent_channels
        if z_t.shape != (T, h_px, w_px, c):
            raise ValueError(f"z_t has shape {z_t.shape}, expected {(T, h_px, w_px, c)}")
        if not (0.0 <= t <= 1.0):
            raise ValueError(f"t must lie in [0, 1], got {t}")
        tokens = np.asarray(context.tokens, dtype=dt)
        if tokens.shape[1:] != (h_px, w_px, cfg.input_channels - c):
            raise ValueError(
                f"context tokens have shape {tokens.shape}, expected "
                f"(*, {h_px}, {w_px}, {cfg.input_channels - c})"
            )
        total = tokens.shape[0]
        use_motion = motion is not None
        if use_motion and track is None:
            raise ValueError("motion injection requires a placement track")
        if use_motion and len(motion) != T:
            raise ValueError(f"motion covers {len(motion)} frames, video has {T}")

        z_slot = np.zeros((total, h_px, w_px, c), dt)
        z_slot[:T] = z_t
        frames = np.concatenate([z_slot, tokens], axis=-1)
        x = encode_segment(frames, self.params["embed.w"], self.params["embed.b"], cfg.patch)

        gh, gw = cfg.token_h, cfg.token_w
        n_tok = gh * gw
        s_total = total * n_tok
        n_video = T * n_tok
        x = x.reshape(s_total, cfg.dim)
        x += time_embedding(t, cfg.dim, dt)
        if global_token is not None:
            x += np.asarray(global_token, dtype=dt)

        frame_times = context.frame_times
        if frame_times is None:
            frame_times = np.arange(total, dtype=np.int64)
        frame_times = np.asarray(frame_times, dtype=np.int64)
        tables = self._tables(frame_times, dt)
        hd = cfg.head_dim
        splits = cfg.rope_config().splits()
        t_scale = max(t, cfg.time_floor)
        cache = (
            {"t_scale": t_scale, "T": T, "total": total,
             "frame_times": frame_times, "blocks": []}
            if want_cache else None
        )

        for i in range(cfg.blocks):
            bc = {"lora": []} if want_cache else None
            lora_sink = bc["lora"] if want_cache else []
            h, ln1_cache = _layernorm(x, self.params[f"block{i}.ln1.g"], self.params[f"block{i}.ln1.b"])
            q = self._lora(h, f"block{i}.attn.q", f"block{i}.q", lora_sink)
            k = self._lora(h, f"block{i}.attn.k", f"block{i}.k", lora_sink)
            v = self._lora(h, f"block{i}.attn.v", f"block{i}.v", lora_sink)
            q = q.reshape(s_total, cfg.heads, hd).transpose(1, 0, 2)
            k = k.reshape(s_total, cfg.heads, hd).transpose(1, 0, 2)
            v = np.ascontiguousarray(v.reshape(s_total, cfg.heads, hd).transpose(1, 0, 2))
            q = _apply_grouped_rotation(q, tables[0], tables[1], splits)
            k = _apply_grouped_rotation(k, tables[0], tables[1], splits)
            attn = np.empty_like(q)
            for head in range(cfg.heads):
                attn[head] = _attention_head(q[head], k[head], v[head])
            attn_cat = np.ascontiguousarray(attn.transpose(1, 0, 2)).reshape(s_total, cfg.dim)
            o = self._lora(attn_cat, f"block{i}.attn.o", f"block{i}.o", lora_sink)
            x = x + o

            mcache = None
            lnq_cache = hq = None
            if use_motion:
                xv = x[:n_video]
                hq, lnq_cache = _layernorm(
                    xv, self.params[f"motion.block{i}.lnq.g"], self.params[f"motion.block{i}.lnq.b"]
                )
                qm = hq @ self.params[f"motion.block{i}.q.w"].T + self.params[f"motion.block{i}.q.b"]
                weights = MotionWeights(
                    key_w=self.params[f"motion.block{i}.key.w"],
                    key_b=self.params[f"motion.block{i}.key.b"],
                    value_w=self.params[f"motion.block{i}.value.w"],
                    value_b=self.params[f"motion.block{i}.value.b"],
                    out_w=self.params[f"motion.block{i}.out.w"],
                    heads=cfg.heads,
                )
                res = motion_cross_attention(
                    qm.reshape(T, gh, gw, cfg.dim), motion, track, cfg.rope_config(),
                    weights, mask_background=cfg.mask_background, want_cache=want_cache,
                )
                if want_cache:
                    res, mcache = res
                x = x.copy()
                x[:n_video] += res.reshape(n_video, cfg.dim)

            h2, ln2_cache = _layernorm(x, self.params[f"block{i}.ln2.g"], self.params[f"block{i}.ln2.b"])
            f = self._lora(h2, f"block{i}.ffn1", f"block{i}.ffn1", lora_sink)
            g_act, cdf = _gelu(f)
            y = self._lora(g_act, f"block{i}.ffn2", f"block{i}.ffn2", lora_sink)
            x = x + y

            if not np.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after block {i}")
            if want_cache:
                bc.update(
                    ln1=ln1_cache, ln2=ln2_cache, q_rot=q, k_rot=k, v=v,
                    attn_cat=attn_cat, f=f, cdf=cdf, mcache=mcache,
                    lnq=lnq_cache, hq=hq, used_motion=use_motion,
                )
                cache["blocks"].append(bc)

        hv, fin_cache = _layernorm(
            x[:n_video], self.params["final.ln.g"], self.params["final.ln.b"]
        )
        head_sink = []
        raw = self._lora(hv, "final.head", "head", head_sink)
        if cfg.patch > 1:
            out = (
                raw.reshape(T, gh, gw, cfg.patch, cfg.patch, c)
                .transpose(0, 1, 3, 2, 4, 5)
                .reshape(T, h_px, w_px, c)
            )
        else:
            out = raw.reshape(T, h_px, w_px, c)
        velocity = out / dt.type(t_scale)

        if want_cache:
            cache["final_ln"] = fin_cache
            cache["head_lora"] = head_sink[0]
            return velocity, cache
        return velocity

    # --------------------------------------------------------------- backward

    def backward(self, g_velocity, cache) -> dict:
        """Gradients of a scalar loss w.r.t. every trainable parameter.

        g_velocity is dL/d(forward output), shape (T, H, W, C).  Returns
        a name->gradient dict covering exactly trainable_parameters().
        """
        cfg = self.cfg
        dt = cfg.np_dtype()
        T, total = cache["T"], cache["total"]
        gh, gw = cfg.token_h, cfg.token_w
        c = cfg.latent_channels
        n_tok = gh * gw
        n_video = T * n_tok
        s_total = total * n_tok
        hd = cfg.head_dim
        splits = cfg.rope_config().splits()
        tables = self._tables(cache["frame_times"], dt)
        grads: dict = {}

        g_out = np.asarray(g_velocity, dtype=dt) / dt.type(cache["t_scale"])
        if cfg.patch > 1:
            g_raw = (
                g_out.reshape(T, gh, cfg.patch, gw, cfg.patch, c)
                .transpose(0, 1, 3, 2, 4, 5)
                .reshape(n_video, cfg.patch * cfg.patch * c)
            )
        else:
            g_raw = g_out.reshape(n_video, c)

        g_hv = self._lora_backward(g_raw, cache["head_lora"], grads)
        g_video, _, _ = _layernorm_backward(g_hv, cache["final_ln"], self.params["final.ln.g"])
        g_x = np.zeros((s_total, cfg.dim), dt)
        g_x[:n_video] = g_video

        for i in reversed(range(cfg.blocks)):
            bc = cache["blocks"][i]
            # lora entries in forward order: q, k, v, o, ffn1, ffn2
            lq, lk, lv, lo, lf1, lf2 = bc["lora"]

            # ffn residual
            g_gact = self._lora_backward(g_x, lf2, grads)
            g_f = _gelu_backward(g_gact, bc["f"], bc["cdf"])
            g_h2 = self._lora_backward(g_f, lf1, grads)
            g_ln2, _, _ = _layernorm_backward(g_h2, bc["ln2"], self.params[f"block{i}.ln2.g"])
            g_x = g_x + g_ln2

            # motion residual (video rows only)
            if bc["used_motion"]:
                g_res = np.ascontiguousarray(g_x[:n_video]).reshape(T, gh, gw, cfg.dim)
                g_qm_grid, mgrads = motion_cross_attention_backward(g_res, bc["mcache"])
                for key, val in mgrads.items():
                    grads[f"motion.block{i}.{key.replace('_', '.')}"] = val
                g_qm = g_qm_grid.reshape(n_video, cfg.dim)
                grads[f"motion.block{i}.q.w"] = g_qm.T @ bc["hq"]
                grads[f"motion.block{i}.q.b"] = g_qm.sum(axis=0)
                g_hq = g_qm @ self.params[f"motion.block{i}.q.w"]
                g_lnq, g_gamma, g_beta = _layernorm_backward(
                    g_hq, bc["lnq"], self.params[f"motion.block{i}.lnq.g"], want_param_grads=True
                )
                grads[f"motion.block{i}.lnq.g"] = g_gamma
                grads[f"motion.block{i}.lnq.b"] = g_beta
                g_x[:n_video] += g_lnq

            # self-attention residual
            g_attn_cat = self._lora_backward(g_x, lo, grads)
            g_attn = np.ascontiguousarray(
                g_attn_cat.reshape(s_total, cfg.heads, hd).transpose(1, 0, 2)
            )
            g_q_rot = np.empty_like(g_attn)
            g_k_rot = np.empty_like(g_attn)
            g_v = np.empty_like(g_attn)
            for head in range(cfg.heads):
                g_q_rot[head], g_k_rot[head], g_v[head] = _attention_head_backward(
                    g_attn[head], bc["q_rot"][head], bc["k_rot"][head], bc["v"][head]
                )
            # the rotation is orthogonal, so its adjoint is the inverse rotation
            g_q = _apply_grouped_rotation(g_q_rot, tables[0], tables[1], splits, inverse=True)
            g_k = _apply_grouped_rotation(g_k_rot, tables[0], tables[1], splits, inverse=True)
            g_q = np.ascontiguousarray(g_q.transpose(1, 0, 2)).reshape(s_total, cfg.dim)
            g_k = np.ascontiguousarray(g_k.transpose(1, 0, 2)).reshape(s_total, cfg.dim)
            g_v = np.ascontiguousarray(g_v.transpose(1, 0, 2)).reshape(s_total, cfg.dim)
            g_h = self._lora_backward(g_q, lq, grads)
            g_h += self._lora_backward(g_k, lk, grads)
            g_h += self._lora_backward(g_v, lv, grads)
            g_ln1, _, _ = _layernorm_backward(g_h, bc["ln1"], self.params[f"block{i}.ln1.g"])
            g_x = g_x + g_ln1

        return grads


def augment_bbox(track: PlacementTrack, rng: np.random.Generator,
                 jitter: float = 1.0, scale_jitter: float = 0.15) -> PlacementTrack:
    """Jitter a placement track: one shared draw per clip, not per frame.

    Center offsets are uniform in +-jitter tokens and the scale factor
    uniform in [1 - scale_jitter, 1 + scale_jitter]; every present box
    is rebuilt from its jittered center and scale.  Draws exactly three
    uniforms regardless of how many frames are present.
    """
    du, dv, ds = rng.uniform(-1.0, 1.0, size=3)
    off_u = du * jitter * track.patch
    off_v = dv * jitter * track.patch
    scale = 1.0 + ds * scale_jitter
    boxes = []
    for box in track.boxes:
        if box is None:
            boxes.append(None)
            continue
        boxes.append(
            BBox.from_center_scale(
                box.frame, box.u + off_u, box.v + off_v, box.a * scale,
                track.grid_h, track.grid_w, track.patch,
            )
        )
    return PlacementTrack(
        boxes=boxes, grid_h=track.grid_h, grid_w=track.grid_w,
        patch=track.patch, depths=list(track.depths),
    )


class Adam:
    """Adam with bias correction and per-group learning rates.

    Groups map a name prefix selection (from model.parameter_groups())
    to a learning rate; moment buffers are keyed by parameter name so
    the optimizer state can be checkpointed and restored exactly.
    """

    def __init__(self, model: ToyModel, lr_adapters: float = 1e-3,
                 lr_motion: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.model = model
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        groups = model.parameter_groups()
        self.lr_by_name = {}
        for name in groups["adapters"]:
            self.lr_by_name[name] = lr_adapters
        for name in groups["motion"]:
            self.lr_by_name[name] = lr_motion
        self.m = {n: np.zeros_like(model.params[n]) for n in self.lr_by_name}
        self.v = {n: np.zeros_like(model.params[n]) for n in self.lr_by_name}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            if name not in self.lr_by_name:
                raise KeyError(f"gradient for unknown trainable parameter {name!r}")
            g = np.asarray(g, dtype=self.m[name].dtype)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            self.model.params[name] -= self.lr_by_name[name] * update

    def state_arrays(self) -> dict:
        out = {}
        for name in self.m:
            out["opt.m." + name] = self.m[name]
            out["opt.v." + name] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        self.t = t
        for name in self.m:
            self.m[name] = arrays["opt.m." + name].astype(self.m[name].dtype)
            self.v[name] = arrays["opt.v." + name].astype(self.v[name].dtype)
