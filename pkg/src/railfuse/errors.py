"""Exception hierarchy shared across the package."""


class RailfuseError(Exception):
    """Base class for all package errors."""

    code = "GENERIC"


class InvalidArgumentError(RailfuseError):
    code = "INVALID_ARGUMENT"


class InvalidLayoutError(RailfuseError):
    code = "INVALID_LAYOUT"


class PrimaryImmutableError(RailfuseError):
    """The primary LiDAR defines the body convention and cannot be perturbed."""

    code = "PRIMARY_IMMUTABLE"


class InsufficientDataError(RailfuseError):
    code = "INSUFFICIENT_DATA"


class InvalidStreamError(RailfuseError):
    code = "INVALID_STREAM"


class CoverageGapError(RailfuseError):
    code = "COVERAGE_GAP"


class NoPrimaryFrameError(RailfuseError):
    code = "NO_PRIMARY_FRAME"


class NoRailsError(RailfuseError):
    code = "NO_RAILS"


class UnreliablePlaneError(RailfuseError):
    code = "UNRELIABLE_PLANE"


class ReintegrationRequiredError(RailfuseError):
    """Bias delta exceeds the first-order correction guard."""

    code = "REINTEGRATION_REQUIRED"


class NoMapError(RailfuseError):
    code = "NO_MAP"


class UnderconstrainedError(RailfuseError):
    code = "UNDERCONSTRAINED"


class InsufficientOverlapError(RailfuseError):
    code = "INSUFFICIENT_OVERLAP"


class InsufficientStructureError(RailfuseError):
    code = "INSUFFICIENT_STRUCTURE"


class DegenerateFrameError(RailfuseError):
    code = "DEGENERATE_FRAME"


class NumericalFailureError(RailfuseError):
    code = "NUMERICAL_FAILURE"


class SubmapTooSparseError(RailfuseError):
    code = "SUBMAP_TOO_SPARSE"


class RejectedKeyframeError(RailfuseError):
    code = "REJECTED_KEYFRAME"


class EmptyMapError(RailfuseError):
    code = "EMPTY_MAP"


class ManifestError(RailfuseError):
    code = "MANIFEST_ERROR"


class CorruptStreamError(RailfuseError):
    code = "CORRUPT_STREAM"


class NoOverlapError(RailfuseError):
    code = "NO_OVERLAP"


class InvalidConfigError(RailfuseError):
    code = "INVALID_CONFIG"
