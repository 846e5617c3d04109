"""Line-based run configuration.

Files are INI-style: ``[model]`` and ``[train]`` sections holding
``key = value`` lines.  Every key is documented in the schema below and
anything not in the schema is rejected, so a typo fails loudly instead
of silently training with a default.
"""

from __future__ import annotations

import configparser

from .harness import TrainSettings
from .model import ModelConfig


class ConfigError(ValueError):
    """A run configuration could not be parsed or validated."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean (true/false), got {raw!r}")


def _parse_floats(raw: str, count: int):
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != count:
        raise ValueError(f"expected {count} comma-separated numbers, got {raw!r}")
    return tuple(float(p) for p in parts)


def _parse_axis_split(raw: str):
    if raw.strip().lower() == "auto":
        return None
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected 'auto' or three comma-separated ints, got {raw!r}")
    return tuple(int(p) for p in parts)


def _parse_names(raw: str):
    names = tuple(p.strip() for p in raw.split(",") if p.strip())
    if not names:
        raise ValueError("expected a comma-separated list of names")
    return names


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str.strip,
    "float3": lambda raw: _parse_floats(raw, 3),
    "axis": _parse_axis_split,
    "names": _parse_names,
}

# section -> key -> (kind, one-line doc).  Defaults come from the
# dataclasses themselves so the template never drifts from the code.
SCHEMA = {
    "model": {
        "dim": ("int", "transformer feature width"),
        "heads": ("int", "attention heads (must divide dim)"),
        "blocks": ("int", "transformer block count"),
        "patch": ("int", "pixels per token edge"),
        "grid_h": ("int", "video token grid height"),
        "grid_w": ("int", "video token grid width"),
        "canon_h": ("int", "canonical motion-map grid height"),
        "canon_w": ("int", "canonical motion-map grid width"),
        "latent_channels": ("int", "latent channels per pixel"),
        "motion_channels": ("int", "channels in the canonical motion maps"),
        "adapter_rank": ("int", "low-rank adapter rank"),
        "adapter_targets": ("names", "projections that receive adapters"),
        "ffn_mult": ("int", "feed-forward hidden width multiplier"),
        "rope_base": ("float", "rotary frequency base"),
        "rope_axis_split": ("axis", "per-axis rotary channels 't,x,y', or auto"),
        "rope_background": ("float", "out-of-box spatial rotary coordinate"),
        "mask_background": ("bool", "drop motion attention outside the boxes entirely"),
        "time_floor": ("float", "smallest timestep used to rescale the output"),
        "dtype": ("str", "activation/parameter dtype (float32 or float64)"),
    },
    "train": {
        "seed": ("int", "global seed; each step derives its own stream from it"),
        "steps": ("int", "optimization steps"),
        "frames": ("int", "frames per training clip"),
        "scene_count": ("int", "distinct scenes in the world pool"),
        "sprite_count": ("int", "distinct sprite identities in the world pool"),
        "point_count": ("int", "scene point-cloud size"),
        "pillar_count": ("int", "pillars per scene"),
        "schedule": ("float3", "mode probabilities 'scene_only,motion_only,full'"),
        "history_prob": ("float", "probability a full-mode sample pins history frames"),
        "lr_adapters": ("float", "learning rate for the low-rank adapters"),
        "lr_motion": ("float", "learning rate for the motion attention weights"),
        "env_dropout": ("float", "probability the env appearance is blanked (full mode)"),
        "memory_prob": ("float", "probability a full-mode sample carries memory frames"),
        "bbox_jitter": ("float", "box center jitter in pixels fed to the model"),
        "bbox_scale_jitter": ("float", "relative box scale jitter fed to the model"),
        "restrict_motion_loss": ("bool", "zero the motion-only loss outside the boxes"),
        "sample_steps": ("int", "Euler steps when sampling/evaluating"),
        "eval_world_count": ("int", "worlds scored by self-reconstruction"),
        "long_horizon_seeds": ("int", "paired seeds for the memory ablation"),
        "log_every": ("int", "steps between progress lines (0 = quiet)"),
        "checkpoint_every": ("int", "steps between mid-run checkpoints (0 = final only)"),
    },
}


def _defaults() -> dict:
    model = ModelConfig()
    train = TrainSettings()
    out = {"model": {}, "train": {}}
    for key in SCHEMA["model"]:
        out["model"][key] = getattr(model, key)
    for key in SCHEMA["train"]:
        out["train"][key] = getattr(train, key)
    return out


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def default_config_text() -> str:
    """A fully documented config file with every key at its default."""
    defaults = _defaults()
    lines = ["# groundedflow run configuration", "# every key below is optional;",
             "# omitted keys keep these defaults", ""]
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, doc) in keys.items():
            lines.append(f"# {doc}")
            lines.append(f"{key} = {_format_value(defaults[section][key])}")
        lines.append("")
    return "\n".join(lines)


def _convert(section: str, key: str, raw: str):
    if section not in SCHEMA:
        raise ConfigError(
            f"unknown section [{section}]; expected one of {sorted(SCHEMA)}"
        )
    if key not in SCHEMA[section]:
        raise ConfigError(
            f"unknown key {key!r} in [{section}]; "
            f"allowed keys: {', '.join(sorted(SCHEMA[section]))}"
        )
    kind = SCHEMA[section][key][0]
    try:
        return _PARSERS[kind](raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def parse_override(text: str):
    """Split a 'section.key=value' command-line override."""
    head, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    section, dot, key = head.strip().partition(".")
    if not dot:
        raise ConfigError(f"override {text!r} must name a section, e.g. train.steps=100")
    return section.strip(), key.strip(), value.strip()


def load_settings(path: str | None = None, overrides=()) -> TrainSettings:
    """Build TrainSettings from an optional config file plus overrides.

    Overrides are 'section.key=value' strings applied after the file,
    validated against the same schema.
    """
    values = {"model": {}, "train": {}}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, strict=True)
        parser.optionxform = str
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
        if parser.defaults():
            raise ConfigError(
                "keys before any [section] header are not allowed; "
                f"got {sorted(parser.defaults())}"
            )
        for section in parser.sections():
            for key, raw in parser.items(section):
                converted = _convert(section, key, raw)
                values.setdefault(section, {})[key] = converted
    for text in overrides:
        section, key, raw = parse_override(text)
        values.setdefault(section, {})[key] = _convert(section, key, raw)
    try:
        model = ModelConfig(**values["model"])
        return TrainSettings(model=model, **values["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
