"""Error types for junctionflow.

Every error carries the CLI exit code it maps to: 1 for solver failures,
2 for usage and configuration problems, 3 for failed acceptance checks.
"""

from typing import List, Optional, Tuple


class JunctionFlowError(Exception):
    """Base class for all junctionflow errors."""

    exit_code: int = 1


class ConfigError(JunctionFlowError, ValueError):
    """A configuration or input assumption is violated."""

    exit_code = 2


class SolverError(JunctionFlowError, RuntimeError):
    """A numerical solve failed."""

    exit_code = 1


class AcceptanceFailure(JunctionFlowError):
    """A verify-mode acceptance threshold was not met."""

    exit_code = 3


class ExpressionError(ConfigError):
    """An expression string could not be parsed."""


class SpacingTooCoarse(ConfigError):
    """Voxel spacing does not resolve the cylinder radius."""


class GeometryOverlap(ConfigError):
    """The node shape cannot host the three port disks."""


class TruncationTooShort(ConfigError):
    """Cylinder stubs of the rescaled node domain are too short."""


class ConservationViolated(ConfigError):
    """The weighted edge velocities do not sum to zero."""

    def __init__(self, message: str, defect: float):
        super().__init__(message)
        self.defect = defect


class WrongSign(ConfigError):
    """An axial velocity violates its sign constraint."""


class MatchingViolated(ConfigError):
    """Data do not vanish at t = 0 as the corner compatibility requires."""


class InsufficientMatching(ConfigError):
    """A higher time derivative of the data does not vanish at t = 0."""


class GammaOutOfWindow(ConfigError):
    """The matching exponent gamma lies outside its admissible window."""


class MOrderTooSmall(ConfigError):
    """The truncation order M is too small for the error estimates."""


class SupportViolation(ConfigError):
    """A datum or velocity component is nonzero where it must vanish."""


class NonpositiveOutflowSpeed(ConfigError):
    """A boundary layer was requested for a non-outflow speed."""


class OutOfRegion(ConfigError):
    """A point lies outside the named region."""


class OutOfDomain(ConfigError):
    """A point lies outside the thin junction or the time interval."""


class GridMismatch(ConfigError):
    """Two fields or solutions live on incompatible grids."""


class SolverDiverged(SolverError):
    """An iterative linear solver did not converge."""


class LinearSolveFailure(SolverError):
    """A reference-solver time step failed."""


class TruncationError(SolverError):
    """A node-layer field has not decayed at the truncation caps."""


class IncompatibleData(SolverError):
    """A disk Neumann problem violates its solvability condition."""

    def __init__(self, message: str, defect: Optional[float] = None):
        super().__init__(message)
        self.defect = defect


class SolvabilityDefect(SolverError):
    """A node-layer problem violates its solvability condition."""

    def __init__(self, message: str, defect: Optional[float] = None):
        super().__init__(message)
        self.defect = defect


class SweepFailure(SolverError):
    """One or more runs of a parameter sweep failed."""

    def __init__(self, failures: List[Tuple[str, JunctionFlowError]]):
        super().__init__("; ".join(f"{label}: {error}" for label, error in failures))
        self.failures = failures
        self.exit_code = max(error.exit_code for _, error in failures)


class CFLAccuracyWarning(UserWarning):
    """The reference time step is coarse compared with the estimated temporal error."""


class TruncationWarning(UserWarning):
    """A node-layer field has not decayed enough at the truncation caps."""
