"""Compositional video generation on a synthetic human-in-scene world.

A desk-scale rectified-flow system: a frozen random transformer adapted
with low-rank updates, motion injected through grounded rotary
cross-attention, and a geometry pipeline that turns camera paths and
subject trajectories into per-frame placement boxes.  Everything runs
on numpy; worlds, training, and evaluation are fully reproducible from
integer seeds.
"""

from .checkpoint import (
    Checkpoint,
    CheckpointError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .conditioning import (
    CanonicalMotionSequence,
    ConditionSet,
    ContextSequence,
    MemoryBank,
    MotionWeights,
    assemble_context,
    motion_cross_attention,
    retrieve_memory,
    update_memory,
)
from .flowmatch import (
    TimestepSampler,
    TrainingMode,
    euler_sample,
    fm_loss,
    fm_loss_grad,
    interpolate,
    masked_target,
    pick_training_mode,
    sample_timestep,
    velocity_target,
)
from .geometry import (
    BBox,
    CameraIntrinsics,
    CameraPose,
    PlacementTrack,
    PointCloud,
    RgbdFrame,
    RootTrajectory,
    backproject_bbox_center,
    estimate_root_depth,
    look_at,
    project_point_cloud,
    project_points,
    propagate_and_project,
    static_bbox_track,
)
from .harness import (
    EVAL_PROTOCOLS,
    TrainResult,
    TrainSettings,
    WorldCache,
    build_training_sample,
    chain_clips,
    evaluate,
    from_latent,
    sample_video,
    to_latent,
    train,
    world_specs,
)
from .metrics import (
    EvalReport,
    background_mse,
    motion_correlation,
    placement_error,
    reconstruction_mse,
    report_equal,
    revisit_drift,
    subject_centroid,
)
from .model import Adam, LowRankAdapter, ModelConfig, ToyModel, augment_bbox, time_embedding
from .rope import (
    RopeConfig,
    canonical_key_rope,
    canonical_positions,
    grounded_coordinates,
    grounded_positions,
    grounded_query_rope,
    rope_rotate,
    rotation_tables,
)
from .runconfig import ConfigError, default_config_text, load_settings
from .world import (
    MOTION_KINDS,
    PATH_KINDS,
    SpriteSpec,
    WorldBundle,
    WorldSpec,
    camera_path,
    generate_world,
    load_world,
    make_scene,
    save_world,
    sprite_joints,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
