"""Prediction-boosted next-best-view planning for aerial 3D reconstruction.

A library for closed-loop coverage missions over synthetic scenes: volumetric
mapping with two-view coverage accounting, pluggable surface prediction,
tour-based global coverage planning, stereo-quality-driven local refinement,
and B-spline trajectory generation, plus reconstruction-quality metrics.
"""

from .errors import (
    AlignmentFailed,
    ConfigError,
    DegenerateGeometry,
    EmptyInput,
    InsufficientPoints,
    InsufficientWaypoints,
    InvalidScale,
    LayerInfeasible,
    LocalPlanInfeasible,
    MapFormatError,
    NoFeasibleViewpoint,
    PredictorUnavailable,
    ReconPlanError,
    UnreachableViewpoint,
)
from .geometry import (
    Aabb,
    PointCloud,
    Pose4,
    centroid,
    estimate_normals,
    resize_to,
    voxel_downsample,
    wrap_angle,
    yaw_gap,
)
from .mapping import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    SensorModel,
    ViewpointIdAllocator,
    VolumetricMap,
)

__version__ = "0.1.0"
