"""Exception hierarchy shared by all modules.

Every error raised on purpose by the package derives from :class:`KoiterFSIError`
so callers (most importantly the CLI) can separate numerical failures from
programming errors.
"""

from __future__ import annotations


class KoiterFSIError(Exception):
    """Base class for all package errors."""


# geometry
class OutsideTubular(KoiterFSIError):
    """The point is not within the tubular neighbourhood of the surface."""


class RatioTooLarge(KoiterFSIError):
    """No cutoff profile satisfies the derivative bound for this ratio."""


class OutsideDomain(KoiterFSIError):
    """The point lies outside the closed reference domain."""


class OutsideDeformedDomain(KoiterFSIError):
    """The point lies outside the closed deformed domain."""


class NoConvergence(KoiterFSIError):
    """An iterative inversion did not reach its tolerance."""


# shell
class SingularMassMatrix(KoiterFSIError):
    """The surface quadrature produced a singular mass matrix."""


class EigenSolverFailure(KoiterFSIError):
    """The generalized eigenvalue problem could not be solved."""


# operators
class InadmissibleDisplacement(KoiterFSIError):
    """The displacement is too large for the Hanzawa map in use."""


class IncompatibleMean(KoiterFSIError):
    """A boundary datum has non-vanishing weighted mean."""

    def __init__(self, message: str, defect: float) -> None:
        super().__init__(message)
        self.defect = defect


class DegenerateBump(KoiterFSIError):
    """The weighted mean of the correction bump is too small."""


class NonNormalTrace(KoiterFSIError):
    """A field expected to have a purely normal trace has a tangential part."""


# stokes
class IncompatibleFlux(KoiterFSIError):
    """Boundary data for the Stokes problem carries net flux."""

    def __init__(self, message: str, defect: float) -> None:
        super().__init__(message)
        self.defect = defect


class SolverBreakdown(KoiterFSIError):
    """The Stokes linear system could not be solved."""


class StokesFailure(KoiterFSIError):
    """The interior Stokes extension failed."""


# galerkin
class RankDeficientBasis(KoiterFSIError):
    """Basis functions are numerically linearly dependent."""


class NonSPDMass(KoiterFSIError):
    """The assembled mass matrix is not symmetric positive definite."""


class IncompatibleInitialRate(KoiterFSIError):
    """The initial shell velocity violates the volume constraint."""


class LinearSolveFailure(KoiterFSIError):
    """A time step could not be solved."""


# coupling
class GapInversion(KoiterFSIError):
    """The regularized initial displacement lies below the true one."""


class MarginViolated(KoiterFSIError):
    """The regularized displacement left the admissible band."""


class MaxIterations(KoiterFSIError):
    """The fixed-point iteration did not converge."""

    def __init__(self, message: str, log: list[float] | None = None) -> None:
        super().__init__(message)
        self.log = list(log or [])


class Diverged(KoiterFSIError):
    """Continuation failed even after shrinking the interval.

    ``trajectory`` holds the accepted part of the run, if any.
    """

    def __init__(self, message: str, trajectory: object | None = None) -> None:
        super().__init__(message)
        self.trajectory = trajectory


# harness
class InequalityViolated(KoiterFSIError):
    """The energy inequality failed at some output time."""

    def __init__(self, message: str, worst_time: float, slack: float) -> None:
        super().__init__(message)
        self.worst_time = worst_time
        self.slack = slack


class ConfigError(KoiterFSIError):
    """The run configuration is malformed."""

    def __init__(self, message: str, key: str | None = None) -> None:
        super().__init__(message)
        self.key = key
