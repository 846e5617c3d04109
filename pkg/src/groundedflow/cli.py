"""Command-line interface: data generation, training, sampling, evaluation.

Every subcommand accepts --config (a [model]/[train] run configuration
file) plus repeatable --set section.key=value overrides, so scripted runs
and one-off experiments share the same validated schema.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .fileio import save_ppm, save_raw_tensor, save_rgbd_sequence
from .geometry import BBox, PlacementTrack
from .harness import evaluate, sample_video, train, world_specs, EVAL_PROTOCOLS
from .rope import canonical_positions, grounded_coordinates, grounded_positions
from .runconfig import ConfigError, load_settings
from .world import (
    MOTION_KINDS,
    PATH_KINDS,
    SpriteSpec,
    WorldSpec,
    generate_world,
    save_world,
)


def _add_config_args(p):
    p.add_argument("--config", metavar="FILE",
                   help="run configuration file with [model] and [train] sections")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE",
                   help="override a single config key (repeatable)")


def _add_world_args(p):
    p.add_argument("--scene-seed", type=int, default=0,
                   help="scene layout seed (default 0)")
    p.add_argument("--motion", choices=MOTION_KINDS, default="wave",
                   help="sprite motion pattern (default wave)")
    p.add_argument("--identity", type=int, default=0,
                   help="sprite identity seed (default 0)")
    p.add_argument("--path-kind", choices=PATH_KINDS, default="orbit",
                   help="camera path (default orbit)")
    p.add_argument("--no-sprite", action="store_true",
                   help="generate the environment without a subject")


def _world_spec(args, settings, cfg):
    sprite = None if getattr(args, "no_sprite", False) else SpriteSpec(
        identity_seed=args.identity, motion=args.motion)
    return WorldSpec(
        scene_seed=args.scene_seed,
        point_count=settings.point_count,
        pillar_count=settings.pillar_count,
        path_kind=args.path_kind,
        frames=settings.frames,
        sprite=sprite,
        grid_h=cfg.grid_h, grid_w=cfg.grid_w,
        canon_h=cfg.canon_h, canon_w=cfg.canon_w,
    )


def _load_model(path):
    if not os.path.exists(path):
        raise CheckpointError(
            f"checkpoint {path} does not exist; train one with 'groundedflow train'")
    return load_checkpoint(path).build_model()


def cmd_gen_data(args):
    settings = load_settings(args.config, args.overrides)
    if args.pool:
        train_specs, holdout_specs = world_specs(settings)
        for i, spec in enumerate(train_specs):
            save_world(generate_world(spec), os.path.join(args.out, f"world_{i:03d}"))
        for i, spec in enumerate(holdout_specs):
            save_world(generate_world(spec), os.path.join(args.out, f"holdout_{i:03d}"))
        print(f"wrote {len(train_specs)} training and {len(holdout_specs)} "
              f"held-out worlds under {args.out}")
        return 0
    spec = _world_spec(args, settings, settings.model)
    bundle = generate_world(spec)
    save_world(bundle, args.out)
    visible = sum(b is not None for b in bundle.track.boxes)
    print(f"wrote world to {args.out}: {spec.frames} frames on a {spec.path_kind} "
          f"path, subject visible in {visible}")
    return 0


def cmd_train(args):
    settings = load_settings(args.config, args.overrides)
    result = train(settings, checkpoint_path=args.checkpoint, resume=args.resume,
                   verbose=not args.quiet)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write("\n".join(result.log) + "\n")
        print(f"wrote training log to {args.log}")
    return 0


def cmd_sample(args):
    settings = load_settings(args.config, args.overrides)
    model = _load_model(args.checkpoint)
    spec = _world_spec(args, settings, model.cfg)
    if spec.sprite is None and not args.no_motion:
        raise ConfigError("--no-sprite requires --no-motion: there is no subject to animate")
    bundle = generate_world(spec)
    memory = bundle.gt[:args.memory_frames] if args.memory_frames else None
    video = sample_video(
        model, bundle,
        seed=args.seed,
        steps=args.steps if args.steps else settings.sample_steps,
        with_motion=not args.no_motion,
        history_frames=args.history,
        memory=memory,
        env_visible=not args.hide_env,
    )
    os.makedirs(args.out, exist_ok=True)
    save_raw_tensor(os.path.join(args.out, "video"), video)
    for i in range(video.shape[0]):
        save_ppm(os.path.join(args.out, f"frame_{i:03d}.ppm"), video[i, :, :, :3])
    print(f"wrote {video.shape[0]} frames to {args.out}")
    return 0


def cmd_eval(args):
    settings = load_settings(args.config, args.overrides)
    model = _load_model(args.checkpoint)
    report = evaluate(model, settings, args.protocol, seed=args.seed,
                      sample_steps=args.steps)
    print(report.table())
    if args.out:
        report.save(args.out)
        print(f"wrote metrics to {args.out}")
    if not report.all_pass():
        failed = sorted(name for name, ok in report.passes().items() if not ok)
        print(f"evaluation thresholds not met: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_inspect_rope(args):
    settings = load_settings(args.config, args.overrides)
    cfg = settings.model
    rope = cfg.rope_config()
    print(f"head_dim {cfg.head_dim}  axis split (t, x, y) = {rope.splits()}  "
          f"base {rope.base:g}  background {rope.background_label:g}")
    canon = canonical_positions(1, cfg.canon_h, cfg.canon_w)[0]
    print(f"canonical grid {cfg.canon_h}x{cfg.canon_w}: key x spans "
          f"[{canon[..., 1].min():g}, {canon[..., 1].max():g}], y spans "
          f"[{canon[..., 2].min():g}, {canon[..., 2].max():g}]")
    x1, y1, x2, y2 = args.box
    box = BBox.from_corners(0, x1, y1, x2, y2, cfg.grid_h, cfg.grid_w, cfg.patch)
    print(f"box corners ({x1}, {y1}) .. ({x2}, {y2}) ground to:")
    exact = True
    for cx, cy, ex, ey in ((x1, y1, 0.0, 0.0), (x2, y1, cfg.canon_w, 0.0),
                           (x1, y2, 0.0, cfg.canon_h), (x2, y2, cfg.canon_w, cfg.canon_h)):
        gx, gy = grounded_coordinates(box, cx, cy, cfg.canon_h, cfg.canon_w)
        exact = exact and float(gx) == ex and float(gy) == ey
        print(f"  corner ({cx:3d}, {cy:3d}) -> canonical ({float(gx):8.4f}, {float(gy):8.4f})")
    print(f"corner correspondence exact: {'yes' if exact else 'NO'}")
    track = PlacementTrack(boxes=[box], grid_h=cfg.grid_h, grid_w=cfg.grid_w,
                           patch=cfg.patch)
    pos = grounded_positions(track, cfg.canon_h, cfg.canon_w, rope)
    out_fraction = float(np.mean(pos[0, ..., 1] == rope.background_label))
    print(f"background fraction of the query grid: {out_fraction:.3f}")
    return 0


def cmd_render_env(args):
    settings = load_settings(args.config, args.overrides)
    spec = dataclasses.replace(_world_spec(args, settings, settings.model), sprite=None)
    bundle = generate_world(spec)
    save_rgbd_sequence(args.out, bundle.env)
    print(f"wrote {len(bundle.env)} environment frames to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groundedflow",
        description="Compositional video generation on a synthetic human-in-scene world.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic world to disk")
    _add_config_args(p)
    _add_world_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pool", action="store_true",
                   help="write the whole training/holdout pool instead of one world")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train adapters and motion attention")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file to write")
    p.add_argument("--resume", action="store_true",
                   help="continue from the existing checkpoint")
    p.add_argument("--log", help="also write the step log to this file")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate a video from a checkpoint")
    _add_config_args(p)
    _add_world_args(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file to load")
    p.add_argument("--out", required=True, help="output directory for frames")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.add_argument("--steps", type=int, default=0,
                   help="Euler steps (default: the configured sample_steps)")
    p.add_argument("--no-motion", action="store_true",
                   help="drop the motion conditioning (scene-only generation)")
    p.add_argument("--history", type=int, default=0,
                   help="pin this many leading frames to ground truth")
    p.add_argument("--memory-frames", type=int, default=0,
                   help="attach this many ground-truth frames as memory")
    p.add_argument("--hide-env", action="store_true",
                   help="blank the environment appearance channels")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint under a protocol")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file to load")
    p.add_argument("--protocol", choices=EVAL_PROTOCOLS, required=True)
    p.add_argument("--seed", type=int, default=0, help="evaluation seed (default 0)")
    p.add_argument("--steps", type=int, default=None,
                   help="Euler steps (default: the configured sample_steps)")
    p.add_argument("--out", help="write the machine-readable metrics here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-rope", help="show how a box grounds onto the canonical grid")
    _add_config_args(p)
    p.add_argument("--box", type=int, nargs=4, metavar=("X1", "Y1", "X2", "Y2"),
                   default=(6, 4, 18, 20),
                   help="token-space box corners (default 6 4 18 20)")
    p.set_defaults(func=cmd_inspect_rope)

    p = sub.add_parser("render-env", help="render the environment without a subject")
    _add_config_args(p)
    _add_world_args(p)
    p.add_argument("--out", required=True, help="output directory for frames")
    p.set_defaults(func=cmd_render_env)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
