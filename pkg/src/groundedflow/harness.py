"""Training, sampling, and evaluation over the synthetic human-in-scene world.

This module wires the pieces together: it builds a pool of procedurally
generated worlds, assembles per-mode training samples (scene-only /
motion-only / full), runs the rectified-flow training loop with exact
resume semantics, samples videos with the Euler integrator, and scores
checkpoints with three evaluation protocols.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import ConditionSet, assemble_context
from .flowmatch import (
    DEFAULT_HISTORY_PROB,
    DEFAULT_SAMPLING_STEPS,
    DEFAULT_SCHEDULE,
    TimestepSampler,
    euler_sample,
    fm_loss_grad,
    interpolate,
    masked_target,
    pick_training_mode,
    sample_timestep,
)
from .metrics import (
    EvalReport,
    background_mse,
    motion_correlation,
    placement_error,
    reconstruction_mse,
)
from .model import Adam, ModelConfig, ToyModel, augment_bbox
from .world import MOTION_KINDS, PATH_KINDS, SpriteSpec, WorldSpec, generate_world

EVAL_PROTOCOLS = ("self_reconstruction", "cross_composition", "long_horizon")

# Held-out (scene, motion, identity) triples: every individual scene,
# motion, and identity still appears in the training pool, only these
# exact combinations are unseen.
HOLDOUT_TRIPLES = (
    (0, "wave", 2),
    (1, "walk", 0),
    (1, "bounce", 2),
    (2, "walk", 1),
    (2, "bounce", 1),
    (3, "sway", 2),
)


def to_latent(x: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixel content onto the [-1, 1] latent interval."""
    return 2.0 * np.asarray(x, dtype=np.float64) - 1.0


def from_latent(z: np.ndarray) -> np.ndarray:
    """Invert to_latent and clip back into the displayable range."""
    return np.clip((np.asarray(z, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)


@dataclasses.dataclass
class TrainSettings:
    """Everything the training loop needs besides the model architecture.

    The per-step RNG is derived from (seed, step), so interrupting and
    resuming a run reproduces the uninterrupted parameter trajectory
    bit for bit.
    """

    seed: int = 0
    steps: int = 500
    frames: int = 8
    scene_count: int = 4
    sprite_count: int = 3
    point_count: int = 60000
    pillar_count: int = 4
    schedule: tuple = DEFAULT_SCHEDULE
    history_prob: float = DEFAULT_HISTORY_PROB
    lr_adapters: float = 1e-3
    lr_motion: float = 1e-4
    env_dropout: float = 0.25
    memory_prob: float = 0.3
    bbox_jitter: float = 1.0
    bbox_scale_jitter: float = 0.15
    restrict_motion_loss: bool = True
    sample_steps: int = DEFAULT_SAMPLING_STEPS
    eval_world_count: int = 4
    long_horizon_seeds: int = 5
    log_every: int = 25
    checkpoint_every: int = 0  # 0 = final checkpoint only
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.frames < 1:
            raise ValueError(f"frames must be >= 1, got {self.frames}")
        if not 1 <= self.scene_count:
            raise ValueError(f"scene_count must be >= 1, got {self.scene_count}")
        if not 1 <= self.sprite_count:
            raise ValueError(f"sprite_count must be >= 1, got {self.sprite_count}")
        for name in ("history_prob", "env_dropout", "memory_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        probs = np.asarray(self.schedule, dtype=np.float64)
        if probs.shape != (3,) or (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(
                f"schedule must be 3 nonnegative probabilities summing to 1, "
                f"got {self.schedule}"
            )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schedule"] = list(self.schedule)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        d = dict(d)
        d["schedule"] = tuple(d.get("schedule", DEFAULT_SCHEDULE))
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


def world_specs(settings: TrainSettings):
    """The full (scene, motion, identity) grid as WorldSpecs.

    Returns (train_specs, holdout_specs).  Camera path kinds cycle
    deterministically through the grid so each appears in training.
    """
    cfg = settings.model
    train, holdout = [], []
    combo_index = 0
    for scene in range(settings.scene_count):
        for motion in MOTION_KINDS:
            for ident in range(settings.sprite_count):
                spec = WorldSpec(
                    scene_seed=scene,
                    point_count=settings.point_count,
                    pillar_count=settings.pillar_count,
                    path_kind=PATH_KINDS[combo_index % len(PATH_KINDS)],
                    frames=settings.frames,
                    sprite=SpriteSpec(identity_seed=ident, motion=motion),
                    grid_h=cfg.grid_h,
                    grid_w=cfg.grid_w,
                    canon_h=cfg.canon_h,
                    canon_w=cfg.canon_w,
                )
                if (scene, motion, ident) in HOLDOUT_TRIPLES:
                    holdout.append(spec)
                else:
                    train.append(spec)
                combo_index += 1
    if not train:  # tiny smoke pools may land entirely in the holdout set
        train, holdout = holdout, []
    return train, holdout


class WorldCache:
    """Lazily generated worlds plus their precomputed latent tensors."""

    def __init__(self, specs):
        self.specs = list(specs)
        self._bundles = {}

    def __len__(self):
        return len(self.specs)

    def bundle(self, i: int):
        if i not in self._bundles:
            b = generate_world(self.specs[i])
            self._bundles[i] = (b, to_latent(b.env_stack()), to_latent(b.gt))
        return self._bundles[i]


def _box_pixel_mask(track, frames: int, grid_h: int, grid_w: int, patch: int) -> np.ndarray:
    """Per-frame binary mask of the pixels inside each placement box."""
    mask = np.zeros((frames, grid_h * patch, grid_w * patch), dtype=np.float64)
    for i, box in enumerate(track.boxes[:frames]):
        if box is None:
            continue
        mask[i, box.y1 * patch:box.y2 * patch, box.x1 * patch:box.x2 * patch] = 1.0
    return mask


def build_training_sample(bundle, env_lat, gt_lat, mode, rng, settings: TrainSettings):
    """Assemble one training sample for the drawn mode.

    The rng consumption is identical across modes (jitter, env dropout,
    memory draws all happen unconditionally), so the step-to-sample
    mapping never depends on branch outcomes.
    """
    cfg = settings.model
    T = len(bundle.env)
    jittered = augment_bbox(bundle.track, rng, settings.bbox_jitter,
                            settings.bbox_scale_jitter)
    u_env = rng.random()
    mem_idx = rng.integers(0, T, size=2)
    u_mem = rng.random()

    full_mask = np.ones((T, cfg.grid_h * cfg.patch, cfg.grid_w * cfg.patch))
    if mode.kind == "scene_only":
        cond = ConditionSet(env=bundle.env, motion=None, identity=bundle.identity,
                            mask=full_mask)
        return {
            "z_target": env_lat,
            "context": assemble_context(cond, cfg.latent_channels),
            "motion": None,
            "track": None,
            "loss_mask": None,
        }

    if mode.kind == "motion_only":
        # Supervision region comes from the true boxes; the jittered track
        # only perturbs what the model is told about the placement.
        box_mask = _box_pixel_mask(bundle.track, T, cfg.grid_h, cfg.grid_w, cfg.patch)
        cond = ConditionSet(env=bundle.env, motion=bundle.motion,
                            identity=bundle.identity, mask=box_mask, keep=env_lat)
        return {
            "z_target": masked_target(gt_lat, env_lat, box_mask),
            "context": assemble_context(cond, cfg.latent_channels),
            "motion": bundle.motion,
            "track": jittered,
            "loss_mask": box_mask if settings.restrict_motion_loss else None,
        }

    if mode.kind != "full":
        raise ValueError(f"unknown training mode {mode.kind!r}")
    mask = full_mask
    keep = np.zeros(gt_lat.shape)
    history = min(mode.history_frames, T - 1)
    if history > 0:
        mask = mask.copy()
        mask[:history] = 0.0
        keep[:history] = gt_lat[:history]
    memory = None
    mem_times = None
    if u_mem < settings.memory_prob:
        # Each memory frame is stamped with its own source time, making it
        # a positional duplicate of that frame.  Attention then reads it
        # through the same zero-offset path it uses for the frame itself,
        # which is what lets pose-matched memories steer generation later.
        mem_times = np.sort(mem_idx)
        memory = bundle.gt[mem_times]
    cond = ConditionSet(env=bundle.env, motion=bundle.motion,
                        identity=bundle.identity, mask=mask,
                        memory=memory, memory_times=mem_times, keep=keep)
    ctx = assemble_context(cond, cfg.latent_channels)
    if u_env < settings.env_dropout:
        # Appearance dropout: blank the env RGB-D channels but leave the
        # keep/mask channels intact so preservation still works.
        ctx.tokens[:T, :, :, :4] = 0.0
    return {
        "z_target": masked_target(gt_lat, keep, mask),
        "context": ctx,
        "motion": bundle.motion,
        "track": jittered,
        "loss_mask": None,
    }


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 4101, step])))


@dataclasses.dataclass
class TrainResult:
    model: ToyModel
    optimizer: Adam
    log: list
    losses: list
    checkpoint_path: str | None


def train(settings: TrainSettings, checkpoint_path: str | None = None,
          resume: bool = False, verbose: bool = True) -> TrainResult:
    """Run (or resume) the mixed-mode training loop.

    Every step derives its own Generator from (seed, step); a resumed
    run therefore consumes exactly the draws the uninterrupted run
    would have, and the final parameters match bit for bit.
    """
    start_step = 0
    if resume:
        if checkpoint_path is None:
            raise ValueError("resume requires a checkpoint path")
        ck = load_checkpoint(checkpoint_path)
        model = ck.build_model()
        optimizer = Adam(model, lr_adapters=settings.lr_adapters,
                         lr_motion=settings.lr_motion)
        optimizer.load_state_arrays(ck.opt_arrays, ck.opt_step)
        start_step = ck.step
        if start_step > settings.steps:
            raise ValueError(
                f"checkpoint is at step {start_step}, beyond the requested {settings.steps}"
            )
    else:
        model = ToyModel(settings.model, seed=settings.seed)
        optimizer = Adam(model, lr_adapters=settings.lr_adapters,
                         lr_motion=settings.lr_motion)

    train_specs, _ = world_specs(settings)
    worlds = WorldCache(train_specs)

    log, losses = [], []

    def emit(line):
        log.append(line)
        if verbose:
            print(line, flush=True)

    emit(f"training pool: {len(worlds)} worlds, steps {start_step}..{settings.steps}, "
         f"seed {settings.seed}")
    wall_start = time.time()
    for step in range(start_step, settings.steps):
        rng = _step_rng(settings.seed, step)
        widx = int(rng.integers(len(worlds)))
        mode = pick_training_mode(rng, settings.schedule, settings.history_prob)
        bundle, env_lat, gt_lat = worlds.bundle(widx)
        sample = build_training_sample(bundle, env_lat, gt_lat, mode, rng, settings)
        t_val = float(sample_timestep(TimestepSampler(seed=int(rng.integers(2**31)))))
        z1 = rng.standard_normal(sample["z_target"].shape)
        z_t = interpolate(sample["z_target"], z1, t_val)

        try:
            pred, cache = model.forward(z_t, t_val, sample["context"],
                                        motion=sample["motion"], track=sample["track"],
                                        want_cache=True)
            loss, g = fm_loss_grad(pred, sample["z_target"], z1, sample["loss_mask"])
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite loss")
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"training diverged at step {step} (mode {mode.kind}): {exc}"
            ) from exc
        grads = model.backward(g, cache)
        optimizer.step(grads)
        losses.append(loss)

        done = step + 1
        if settings.log_every and (done % settings.log_every == 0 or done == settings.steps):
            rate = (time.time() - wall_start) / max(done - start_step, 1)
            emit(f"step {done:5d}/{settings.steps}  mode={mode.kind:<11s} "
                 f"t={t_val:.3f}  loss={loss:.6f}  ({rate:.2f}s/step)")
        if (checkpoint_path and settings.checkpoint_every
                and done % settings.checkpoint_every == 0 and done != settings.steps):
            save_checkpoint(checkpoint_path, model, step=done, optimizer=optimizer,
                            rng_state={"scheme": "seed-step", "seed": settings.seed})

    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, step=settings.steps, optimizer=optimizer,
                        rng_state={"scheme": "seed-step", "seed": settings.seed})
        emit(f"saved checkpoint to {checkpoint_path} at step {settings.steps}")
    return TrainResult(model=model, optimizer=optimizer, log=log, losses=losses,
                       checkpoint_path=checkpoint_path)


def sample_video(model: ToyModel, bundle, *, seed: int = 0,
                 steps: int = DEFAULT_SAMPLING_STEPS, with_motion: bool = True,
                 history_frames: int = 0, memory: np.ndarray | None = None,
                 memory_times: np.ndarray | None = None,
                 env_visible: bool = True, return_latent: bool = False,
                 history_video: np.ndarray | None = None):
    """Generate one clip for a world bundle.

    history_frames > 0 pins that many leading frames to known content:
    their latents are projected back onto the straight path toward that
    content after every integration step.  The pinned frames come from
    the bundle's ground truth unless history_video supplies them (for
    chaining off previously generated frames).

    memory_times stamps each memory frame with the timestep it should
    steer (a revisit is stamped with the revisiting frame's index, not
    the index it was captured at).
    """
    cfg = model.cfg
    T = len(bundle.env)
    h = min(max(int(history_frames), 0), T - 1)
    if history_video is not None:
        if len(history_video) < h:
            raise ValueError(
                f"history_video has {len(history_video)} frames, need {h}")
        gt_lat = np.zeros((T,) + history_video.shape[1:])
        gt_lat[:h] = to_latent(history_video[:h])
    else:
        gt_lat = to_latent(bundle.gt)
    mask = np.ones((T, cfg.grid_h * cfg.patch, cfg.grid_w * cfg.patch))
    keep = np.zeros(gt_lat.shape)
    if h > 0:
        mask[:h] = 0.0
        keep[:h] = gt_lat[:h]
    cond = ConditionSet(env=bundle.env,
                        motion=bundle.motion if with_motion else None,
                        identity=bundle.identity, mask=mask, memory=memory,
                        memory_times=memory_times,
                        keep=keep if h > 0 else None)
    ctx = assemble_context(cond, cfg.latent_channels)
    if not env_visible:
        ctx.tokens[:T, :, :, :4] = 0.0

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7707])))
    z1 = rng.standard_normal((T, cfg.grid_h * cfg.patch, cfg.grid_w * cfg.patch,
                              cfg.latent_channels))
    motion_arg = bundle.motion if with_motion else None
    track_arg = bundle.track if with_motion else None

    def fn(z, t, _cond):
        return model.forward(z, t, ctx, motion=motion_arg, track=track_arg)

    project = None
    if h > 0:
        z1_hist, keep_hist = z1[:h].copy(), keep[:h]

        def project(z, t_next):
            z[:h] = t_next * z1_hist + (1.0 - t_next) * keep_hist
            return z

    z = euler_sample(fn, z1, cond=None, steps=steps, project=project)
    video = from_latent(z)
    if return_latent:
        return video, z
    return video


def chain_clips(model: ToyModel, bundle, *, clips: int, history_frames: int,
                seed: int = 0, steps: int = DEFAULT_SAMPLING_STEPS,
                with_motion: bool = True):
    """Generate a long video as a chain of clips sharing overlapping frames.

    Clip 0 is sampled free-running; every later clip pins its first
    history_frames frames to the tail of the previous clip and the
    overlap is dropped when the chain is assembled, so the result has
    clips * T - (clips - 1) * history_frames frames.
    """
    T = len(bundle.env)
    if clips < 1:
        raise ValueError(f"clips must be >= 1, got {clips}")
    if not 1 <= history_frames <= T - 1:
        raise ValueError(
            f"history_frames must be in [1, {T - 1}], got {history_frames}")
    h = history_frames
    pieces = []
    prev = None
    for k in range(clips):
        if prev is None:
            clip = sample_video(model, bundle, seed=seed, steps=steps,
                                with_motion=with_motion)
            pieces.append(clip)
        else:
            clip = sample_video(model, bundle, seed=seed + k, steps=steps,
                                with_motion=with_motion, history_frames=h,
                                history_video=prev[T - h:])
            pieces.append(clip[h:])
        prev = clip
    return np.concatenate(pieces, axis=0)


def _spread_indices(n_total: int, n_pick: int):
    n_pick = min(n_pick, n_total)
    return [int(round(i * (n_total - 1) / max(n_pick - 1, 1))) for i in range(n_pick)] \
        if n_pick > 1 else [0]


def _evaluate_self(model, settings, seed, steps):
    train_specs, _ = world_specs(settings)
    worlds = WorldCache(train_specs)
    untrained = ToyModel(settings.model, seed=settings.seed)
    placement, bg_full, bg_scene, recon, recon_base, corr = [], [], [], [], [], []
    for j, i in enumerate(_spread_indices(len(worlds), settings.eval_world_count)):
        bundle, _, _ = worlds.bundle(i)
        env = bundle.env_stack()
        gen = sample_video(model, bundle, seed=seed + j, steps=steps)
        scene = sample_video(model, bundle, seed=seed + j, steps=steps, with_motion=False)
        base = sample_video(untrained, bundle, seed=seed + j, steps=1)
        placement.append(placement_error(gen, env, bundle.track))
        bg_full.append(background_mse(gen, env, bundle.track))
        bg_scene.append(background_mse(scene, env, bundle.track))
        recon.append(reconstruction_mse(gen, bundle.gt))
        recon_base.append(reconstruction_mse(base, bundle.gt))
        corr.append(motion_correlation(gen, env, bundle.motion.maps[..., 3], bundle.track))
    bg_scene_mean = float(np.mean(bg_scene))
    recon_base_mean = float(np.mean(recon_base))
    metrics = {
        "placement_tokens": float(np.mean(placement)),
        "background_mse": float(np.mean(bg_full)),
        "background_mse_scene_only": bg_scene_mean,
        "background_ratio": float(np.mean(bg_full) / max(bg_scene_mean, 1e-12)),
        "reconstruction_mse": float(np.mean(recon)),
        "reconstruction_mse_untrained": recon_base_mean,
        "reconstruction_ratio": float(np.mean(recon) / max(recon_base_mean, 1e-12)),
        "motion_correlation": float(np.mean(corr)),
    }
    thresholds = {
        "placement_tokens": (2.0, "max"),
        "background_ratio": (3.0, "max"),
        "reconstruction_ratio": (0.25, "max"),
    }
    return EvalReport(protocol="self_reconstruction", metrics=metrics,
                      thresholds=thresholds)


def _evaluate_cross(model, settings, seed, steps, baseline_background):
    _, holdout_specs = world_specs(settings)
    if not holdout_specs:
        raise ValueError("no held-out worlds at this pool size; "
                         "raise scene_count/sprite_count to at least the defaults")
    worlds = WorldCache(holdout_specs)
    if baseline_background is None:
        self_report = _evaluate_self(model, settings, seed, steps)
        baseline_background = self_report.metrics["background_mse"]
    placement, bg, corr = [], [], []
    for j in range(len(worlds)):
        bundle, _, _ = worlds.bundle(j)
        env = bundle.env_stack()
        gen = sample_video(model, bundle, seed=seed + 100 + j, steps=steps)
        placement.append(placement_error(gen, env, bundle.track))
        bg.append(background_mse(gen, env, bundle.track))
        corr.append(motion_correlation(gen, env, bundle.motion.maps[..., 3], bundle.track))
    metrics = {
        "placement_tokens": float(np.mean(placement)),
        "background_mse": float(np.mean(bg)),
        "background_mse_self_baseline": float(baseline_background),
        "background_ratio": float(np.mean(bg) / max(float(baseline_background), 1e-12)),
        "motion_correlation": float(np.mean(corr)),
        "held_out_worlds": float(len(worlds)),
    }
    thresholds = {
        "placement_tokens": (3.0, "max"),
        "background_ratio": (1.5, "max"),
    }
    return EvalReport(protocol="cross_composition", metrics=metrics,
                      thresholds=thresholds)


def _long_horizon_specs(settings: TrainSettings, count: int):
    cfg = settings.model
    specs = []
    for i in range(count):
        specs.append(WorldSpec(
            scene_seed=i % settings.scene_count,
            point_count=settings.point_count,
            pillar_count=settings.pillar_count,
            path_kind="loop_and_revisit",
            frames=settings.frames,
            sprite=SpriteSpec(identity_seed=i % settings.sprite_count,
                              motion=MOTION_KINDS[i % len(MOTION_KINDS)]),
            grid_h=cfg.grid_h, grid_w=cfg.grid_w,
            canon_h=cfg.canon_h, canon_w=cfg.canon_w,
        ))
    return specs


def _evaluate_long_horizon(model, settings, seed, steps):
    """Paired with/without-memory revisit consistency on closed camera loops.

    The env appearance channels are blanked, so the only route back to the
    true scene content at the revisited viewpoint is the memory segment
    (one ground-truth frame from the loop start).  Drift scores the final
    frame, whose camera pose has returned to the start, against the clean
    frame-0 environment render outside the subject region; both runs of a
    pair integrate the same noise.
    """
    count = max(int(settings.long_horizon_seeds), 1)
    with_mem, without_mem = [], []
    for i, spec in enumerate(_long_horizon_specs(settings, count)):
        bundle = generate_world(spec)
        memory = bundle.gt[:1]
        # Loop closure: the final frame's pose matches frame 0, so the
        # memory of frame 0 is stamped with the final index.  That makes
        # it a positional twin of the frame it should steer.
        t_end = np.array([len(bundle.env) - 1], dtype=np.int64)
        env0 = bundle.env[0].stack()[None]
        common = dict(seed=seed + 500 + i, steps=steps, env_visible=False)
        video_mem = sample_video(model, bundle, memory=memory,
                                 memory_times=t_end, **common)
        video_plain = sample_video(model, bundle, memory=None, **common)
        with_mem.append(background_mse(video_mem[-1:], env0, bundle.track))
        without_mem.append(background_mse(video_plain[-1:], env0, bundle.track))
    with_mem = np.asarray(with_mem)
    without_mem = np.asarray(without_mem)
    helped = float(np.mean(with_mem < without_mem))
    metrics = {
        "drift_with_memory": float(with_mem.mean()),
        "drift_without_memory": float(without_mem.mean()),
        "memory_helped_fraction": helped,
        "mean_drift_reduction": float((without_mem - with_mem).mean()),
        "paired_seeds": float(len(with_mem)),
    }
    thresholds = {"memory_helped_fraction": (1.0, "min")}
    return EvalReport(protocol="long_horizon", metrics=metrics, thresholds=thresholds)


def evaluate(model: ToyModel, settings: TrainSettings, protocol: str, *,
             seed: int = 0, sample_steps: int | None = None,
             baseline_background: float | None = None) -> EvalReport:
    """Score a model under one of the three protocols.

    self_reconstruction: training worlds, full conditioning, pixel ground
    truth available.  cross_composition: held-out (scene, motion, identity)
    triples; no pixel ground truth is consulted, only placement geometry
    and the clean env render.  long_horizon: paired memory ablation on
    loop-and-revisit paths.
    """
    if protocol not in EVAL_PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {EVAL_PROTOCOLS}")
    steps = settings.sample_steps if sample_steps is None else sample_steps
    if protocol == "self_reconstruction":
        return _evaluate_self(model, settings, seed, steps)
    if protocol == "cross_composition":
        return _evaluate_cross(model, settings, seed, steps, baseline_background)
    return _evaluate_long_horizon(model, settings, seed, steps)
