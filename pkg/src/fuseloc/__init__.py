"""Fusion localization with a learnable scene-aware measurement error model."""

from .se2 import (
    Pose2,
    accumulate_global,
    angle_difference,
    compose,
    from_matrix,
    inverse,
    normalize_angle,
    to_matrix,
)
from .info_filter import (
    InfoState,
    SingularStateError,
    eif_fuse_step,
    fuse_step,
    fuse_step_multi,
    info_to_moments,
    init_state,
    rotate_information,
    translation_scale,
)
from .scene_model import (
    GridSpec,
    NetArchitecture,
    NetParams,
    SceneGrid,
    descriptor_to_info,
    descriptor_to_lower,
    init_params,
    load_model,
    net_backward,
    net_forward,
    rasterize,
    save_model,
)
from .baselines import (
    ObjectiveEval,
    SCALE_GRID,
    WeightedSamples,
    hessian_covariance,
    rescale_search,
    sampling_covariance,
)
from .simulator import (
    Dataset,
    Frame,
    SimConfig,
    World,
    build_corridor,
    correlative_match,
    load_dataset,
    raycast_scan,
    save_dataset,
    serpentine_path,
    simulate_run,
    true_global_poses,
)
from .training import (
    TrainConfig,
    backward_update,
    forward_rollout,
    pose_loss,
    supervision_gate,
    train,
)
from .evaluation import (
    SegmentStats,
    compare_methods,
    dr_trajectory,
    eso_trajectory,
    fused_trajectory,
    segment_errors,
)

__version__ = "0.1.0"
