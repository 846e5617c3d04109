"""Rectified-flow objective, masked targets, mode schedule, and ODE sampling.

Latents travel the straight path z_t = t*z1 + (1-t)*z0 between data z0
and Gaussian noise z1, so the regression target for the velocity model
is the constant z1 - z0.  Masked training replaces z0 with a composite
target that keeps preserved content outside the synthesis mask.

Array arguments accept either a raw (T, H, W, C) ndarray or a
LatentVideo wrapper; numeric results are returned as plain ndarrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SCHEDULE = (0.10, 0.25, 0.65)
DEFAULT_HISTORY_PROB = 0.5
MAX_HISTORY_FRAMES = 9
DEFAULT_SAMPLING_STEPS = 20

MODE_KINDS = ("scene_only", "motion_only", "full")


@dataclass(eq=False)
class LatentVideo:
    """A (T, H, W, C) latent grid tagged with its role along the flow path."""

    data: np.ndarray
    role: str = "clean"

    ROLES = ("clean", "noise", "interpolant", "keep")

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"latent video must be (T, H, W, C), got {self.data.shape}")
        if self.role not in self.ROLES:
            raise ValueError(f"unknown role {self.role!r}, expected one of {self.ROLES}")
        if not np.isfinite(self.data).all():
            raise ValueError("latent video contains non-finite entries")

    @property
    def shape(self):
        return self.data.shape


def _data(z) -> np.ndarray:
    return z.data if isinstance(z, LatentVideo) else np.asarray(z)


@dataclass(frozen=True)
class TrainingMode:
    """One of the three conditioning regimes, plus optional motion history.

    scene_only disables motion injection entirely; motion_only restricts
    supervision to the union of subject bboxes; full trains everything.
    history_frames = 0 means no history conditioning, otherwise the
    first 1..9 frames are given as preserved context.
    """

    kind: str
    history_frames: int = 0

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ValueError(f"unknown mode {self.kind!r}, expected one of {MODE_KINDS}")
        if not (0 <= self.history_frames <= MAX_HISTORY_FRAMES):
            raise ValueError(
                f"history frames must be 0..{MAX_HISTORY_FRAMES}, got {self.history_frames}"
            )

    @property
    def motion_enabled(self) -> bool:
        return self.kind != "scene_only"


@dataclass(eq=False)
class TimestepSampler:
    """Logit-normal timestep distribution: t = sigmoid(mu + sigma * n)."""

    mu: float = 0.0
    sigma: float = 1.0
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        self.rng = np.random.Generator(np.random.PCG64(self.seed))


def sample_timestep(sampler: TimestepSampler, n: int | None = None):
    """Draw t strictly inside (0, 1) from the sampler's logit-normal law."""
    normal = sampler.rng.standard_normal(n)
    return 1.0 / (1.0 + np.exp(-(sampler.mu + sampler.sigma * normal)))


def interpolate(z0, z1, t: float) -> np.ndarray:
    """Straight-path interpolant z_t = t*z1 + (1-t)*z0."""
    z0, z1 = _data(z0), _data(z1)
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {z1.shape}")
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t * z1 + (1.0 - t) * z0


def velocity_target(z0, z1) -> np.ndarray:
    """Ground-truth velocity along the straight path: z1 - z0."""
    z0, z1 = _data(z0), _data(z1)
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {z1.shape}")
    return z1 - z0


def _mask_channels(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    if mask.ndim == like.ndim - 1:
        mask = mask[..., None]
    return mask


def masked_target(z0, z_keep, mask) -> np.ndarray:
    """Composite target: z0 where mask = 1, preserved content where mask = 0."""
    z0, z_keep = _data(z0), _data(z_keep)
    if z0.shape != z_keep.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {z_keep.shape}")
    mask = _mask_channels(mask, z0)
    return mask * z0 + (1.0 - mask) * z_keep


def fm_loss(predicted_v, z_target, z1, loss_mask=None) -> float:
    """Mean squared error against the straight-path velocity z1 - z_target.

    With ``loss_mask`` the residual is zeroed where the mask is 0 before
    averaging (the motion-only restriction); the mean always runs over
    all elements so the reduction is mask-independent.
    """
    predicted_v, z_target, z1 = _data(predicted_v), _data(z_target), _data(z1)
    if not (predicted_v.shape == z_target.shape == z1.shape):
        raise ValueError(
            f"shape mismatch {predicted_v.shape} / {z_target.shape} / {z1.shape}"
        )
    residual = predicted_v - (z1 - z_target)
    if loss_mask is not None:
        residual = residual * _mask_channels(loss_mask, residual)
    return float(np.mean(residual * residual, dtype=np.float64))


def fm_loss_grad(predicted_v, z_target, z1, loss_mask=None):
    """fm_loss together with its gradient w.r.t. the prediction."""
    predicted_v, z_target, z1 = _data(predicted_v), _data(z_target), _data(z1)
    residual = predicted_v - (z1 - z_target)
    if loss_mask is not None:
        # The mask is binary, so zeroing the residual once also yields
        # the correct gradient 2*mask*residual/N.
        residual = residual * _mask_channels(loss_mask, residual)
    loss = float(np.mean(residual * residual, dtype=np.float64))
    grad = residual * (2.0 / residual.size)
    return loss, grad


def pick_training_mode(
    rng: np.random.Generator,
    schedule=DEFAULT_SCHEDULE,
    history_prob: float = DEFAULT_HISTORY_PROB,
) -> TrainingMode:
    """Draw a training mode per the mixed-conditioning schedule.

    schedule = (p_scene_only, p_motion_only, p_full).  Independently of
    the mode, motion history is enabled with probability history_prob
    and its length drawn uniformly from 1..9.  The rng consumes a fixed
    number of draws per call regardless of outcome.
    """
    probs = np.asarray(schedule, dtype=np.float64)
    if probs.shape != (3,) or (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError(f"schedule must be 3 nonnegative probabilities summing to 1, got {schedule}")
    u_mode = rng.random()
    u_hist = rng.random()
    length = int(rng.integers(1, MAX_HISTORY_FRAMES + 1))
    if u_mode < probs[0]:
        kind = "scene_only"
    elif u_mode < probs[0] + probs[1]:
        kind = "motion_only"
    else:
        kind = "full"
    history = length if u_hist < history_prob else 0
    return TrainingMode(kind=kind, history_frames=history)


def euler_sample(model, z1, cond, steps: int = DEFAULT_SAMPLING_STEPS, project=None) -> np.ndarray:
    """Integrate z' = -v_theta(z, t) from t = 1 down to 0 on a uniform grid.

    ``model(z, t, cond)`` returns the predicted velocity.  ``project``,
    if given, is applied as project(z, t_next) after every step; the
    harness uses it to re-impose preserved history frames on the path.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    z = _data(z1).copy()
    ts = np.linspace(1.0, 0.0, steps + 1)
    for i in range(steps):
        t = float(ts[i])
        v = _data(model(z, t, cond))
        if not np.isfinite(v).all():
            raise FloatingPointError(f"non-finite velocity at sampling step {i} (t={t:.4f})")
        z = z - (t - float(ts[i + 1])) * v
        if project is not None:
            z = project(z, float(ts[i + 1]))
    return z
