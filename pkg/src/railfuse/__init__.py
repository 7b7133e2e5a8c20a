"""Multi-LiDAR / IMU / wheel-odometer / GNSS fusion engine for rail vehicles.

The package is organized as a numpy library:

- ``geometry``       rotation & rigid-transform algebra, integer-nanosecond time
- ``simulator``      deterministic synthetic rail world and sensor streams
- ``preintegration`` IMU + odometer preintegration with analytic Jacobians
- ``frontend``       LiDAR preprocessing, feature and rail-track extraction
- ``registration``   feature/GICP/ICP/NDT alignment kernels, degeneracy factor
- ``estimator``      sliding-window MAP estimator with Schur marginalization
- ``calibration``    online multi-LiDAR extrinsic refinement
- ``mapping``        submap management and global map export
- ``dataset``        CSV dataset reading/writing
- ``pipeline``       end-to-end orchestration
- ``metrics``        trajectory evaluation (ATE RMSE)
- ``cli``            command line entry points
"""

from railfuse.errors import (
    CorruptStreamError,
    CoverageGapError,
    DegenerateFrameError,
    EmptyMapError,
    InsufficientDataError,
    InsufficientOverlapError,
    InsufficientStructureError,
    InvalidArgumentError,
    InvalidConfigError,
    InvalidLayoutError,
    InvalidStreamError,
    ManifestError,
    NoMapError,
    NoOverlapError,
    NoPrimaryFrameError,
    NoRailsError,
    NumericalFailureError,
    PrimaryImmutableError,
    ReintegrationRequiredError,
    SubmapTooSparseError,
    UnderconstrainedError,
    UnreliablePlaneError,
)

__version__ = "0.1.0"

__all__ = [
    "CorruptStreamError",
    "CoverageGapError",
    "DegenerateFrameError",
    "EmptyMapError",
    "InsufficientDataError",
    "InsufficientOverlapError",
    "InsufficientStructureError",
    "InvalidArgumentError",
    "InvalidConfigError",
    "InvalidLayoutError",
    "InvalidStreamError",
    "ManifestError",
    "NoMapError",
    "NoOverlapError",
    "NoPrimaryFrameError",
    "NoRailsError",
    "NumericalFailureError",
    "PrimaryImmutableError",
    "ReintegrationRequiredError",
    "SubmapTooSparseError",
    "UnderconstrainedError",
    "UnreliablePlaneError",
]
