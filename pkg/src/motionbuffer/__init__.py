"""Long-horizon skeletal motion synthesis via buffered, per-frame denoising."""

from .data import (
    DatasetConfig,
    NormalizationStats,
    TrainingWindow,
    downsample,
    encode_clip,
    export_bvh,
    generate_toy_dataset,
    load_dataset,
    make_windows,
    parse_bvh,
    save_dataset,
    toy_skeleton,
)
from .estimator import MotionDiffusionGenerator
from .metrics import MetricReport, evaluate_clip, foot_slide_metric, windowed_pose_variance
from .motion import (
    MotionClip,
    Skeleton,
    compute_contact_labels,
    forward_kinematics,
    world_joint_positions,
)
from .network import DenoiserModel, NetConfig, load_model, save_model
from .rotations import DegenerateRotationError, matrix_to_sixd, sixd_to_matrix
from .sampling import (
    MotionBuffer,
    MotionGuide,
    TrajectorySpec,
    generate,
    generate_guided,
    generate_trajectory,
    init_buffer,
    step,
    synthesize,
)
from .schedules import (
    VarianceSchedule,
    build_variance_schedule,
    monotonic_levels,
    posterior_step,
    q_sample,
    sample_random_levels,
)
from .training import (
    TrainConfig,
    TrainState,
    init_train_state,
    load_train_state,
    loss_contact,
    loss_diffusion,
    loss_positional,
    save_train_state,
    train,
    train_step,
)

__version__ = "0.1.0"
