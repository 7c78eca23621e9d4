"""multisfm: joint multi-session structure-from-motion on synthetic surveys.

Reconstructs temporally separated survey sessions in a single incremental
SfM problem by admitting verified cross-session correspondences into the
match graph, and compares against per-session reconstruction followed by
post-hoc point-cloud alignment.
"""
from . import errors
from ._kernels import BACKEND as KERNEL_BACKEND
from .geometry import (
    CameraIntrinsics,
    PoseSE3,
    RansacConfig,
    Sim3Transform,
    estimate_relative_pose,
    project,
    project_many,
    solve_pnp,
    triangulate_dlt,
    umeyama_align,
)
from .keypoints import Keypoints
from .matching import (
    MatchGraph,
    MatchingConfig,
    PairMatches,
    build_match_graph,
    match_handcrafted,
    match_robust,
    rotation_augmented_match,
    verify_pair_geometry,
)
from .evaluation import (
    EvaluationReport,
    aggregate_report,
    associate_query_point,
    compute_reprojection_errors,
    matching_cost_report,
)
from .placerec import (
    CandidatePairs,
    DistanceMatrix,
    GlobalDescriptor,
    compute_distance_matrix,
    compute_global_descriptor,
    select_cross_session_pairs,
)
from .registration import (
    IcpConfig,
    PointCloud,
    align_posthoc,
    icp_point_to_point,
)
from .sfm import (
    BundleConfig,
    Reconstruction,
    SfmConfig,
    bundle_adjust,
    build_tracks,
    reconstruct_joint,
    reconstruct_per_session,
)
from .simulator import (
    SceneConfig,
    SessionConfig,
    SyntheticScene,
    generate_annotations,
    generate_scene,
)

__version__ = "0.1.0"
