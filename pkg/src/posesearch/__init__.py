"""Single-view object pose estimation by generating and matching images
from both the reference and the query side at shared intermediate viewpoints.
"""

from .backend import (
    Backend,
    BackendDescriptor,
    DegradationModel,
    DenoiseRequest,
    GenerationRequest,
    GenerationResult,
    OracleBackend,
    OracleObject,
    make_oracle_backend,
    oracle_render,
)
from .errors import (
    BackendUnavailable,
    InvalidConditioning,
    InvalidCount,
    InvalidScheduleParams,
    IoFailure,
    NonRotationInput,
    PartialFailure,
    PoleDegenerate,
    PoseSearchError,
    ProtocolMismatch,
    ServerError,
    ShapeMismatch,
    Unreachable,
)
from .geometry import (
    ViewChange,
    Viewpoint,
    apply_change,
    fibonacci_hemisphere,
    great_circle_deg,
    relative_change,
    rotation_error_deg,
    viewpoint_to_rotation,
)
from .imaging import ImageBuffer, NoiseSchedule, TensorBuffer, add_noise, make_schedule, sample_noise
from .remote import RemoteBackend, RemoteConfig
from .scoring import (
    ReferenceContext,
    ScoreConfig,
    ScoreValue,
    build_reference_context,
    naive_score,
    resample_noises,
    two_side_score,
)
from .search import (
    PoseEstimate,
    RefineConfig,
    SearchSchedule,
    coarse_search,
    estimate_pose,
    refine,
)
from .server import make_server

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "BackendDescriptor",
    "BackendUnavailable",
    "DegradationModel",
    "DenoiseRequest",
    "GenerationRequest",
    "GenerationResult",
    "ImageBuffer",
    "InvalidConditioning",
    "InvalidCount",
    "InvalidScheduleParams",
    "IoFailure",
    "NoiseSchedule",
    "NonRotationInput",
    "OracleBackend",
    "OracleObject",
    "PartialFailure",
    "PoleDegenerate",
    "PoseEstimate",
    "PoseSearchError",
    "ProtocolMismatch",
    "ReferenceContext",
    "RefineConfig",
    "RemoteBackend",
    "RemoteConfig",
    "ScoreConfig",
    "ScoreValue",
    "SearchSchedule",
    "ServerError",
    "ShapeMismatch",
    "TensorBuffer",
    "Unreachable",
    "ViewChange",
    "Viewpoint",
    "add_noise",
    "apply_change",
    "build_reference_context",
    "coarse_search",
    "estimate_pose",
    "fibonacci_hemisphere",
    "great_circle_deg",
    "make_oracle_backend",
    "make_schedule",
    "make_server",
    "naive_score",
    "oracle_render",
    "refine",
    "relative_change",
    "resample_noises",
    "rotation_error_deg",
    "sample_noise",
    "two_side_score",
    "viewpoint_to_rotation",
]
