"""Exception types shared across the toolkit."""


class ReconPlanError(Exception):
    """Base class for all errors raised by this package."""


class EmptyInput(ReconPlanError):
    """An operation that requires a non-empty cloud received an empty one."""


class InsufficientPoints(ReconPlanError):
    """Fewer points than the operation needs (e.g. neighborhood size)."""


class InvalidScale(ReconPlanError):
    """A scale estimate with a non-positive component."""


class PredictorUnavailable(ReconPlanError):
    """A predictor backend could not be loaded (missing files, bad format)."""


class NoFeasibleViewpoint(ReconPlanError):
    """Every candidate viewpoint of a cluster was rejected."""


class UnreachableViewpoint(ReconPlanError):
    """Tour solving found viewpoints that cannot be reached at finite cost."""

    def __init__(self, indices):
        self.indices = sorted(indices)
        super().__init__(f"unreachable viewpoint indices: {self.indices}")


class LayerInfeasible(ReconPlanError):
    """A candidate layer of the local graph came up empty."""


class LocalPlanInfeasible(ReconPlanError):
    """No finite-cost chain through the local graph."""


class DegenerateGeometry(ReconPlanError):
    """A geometric score was requested for coincident/zero-length inputs."""


class InsufficientWaypoints(ReconPlanError):
    """Trajectory fitting needs at least two waypoints."""


class AlignmentFailed(ReconPlanError):
    """Iterative alignment diverged."""


class MapFormatError(ReconPlanError):
    """A serialized map container failed validation."""


class ConfigError(ReconPlanError):
    """A mission configuration file is missing keys or malformed."""
