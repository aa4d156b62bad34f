"""Exception types shared across the package.

Each error maps to a distinct failure mode of the pipeline; the CLI
translates the pipeline errors into stable exit codes.
"""


class FeshrgError(Exception):
    """Base class for all package errors."""


class ConfigError(FeshrgError):
    """Invalid configuration value or malformed config file."""


class GridMismatch(FeshrgError):
    """Operands sampled on incompatible momentum grids."""


class SymmetryError(FeshrgError):
    """Rotation not compatible with the discrete direction set."""


class KernelMissing(FeshrgError):
    """A required (m, n) kernel entry is absent."""


class TruncationError(FeshrgError):
    """Photon truncation too small for the requested computation."""


class SeriesDiverged(FeshrgError):
    """Neumann series ratio estimate is not contracting."""

    def __init__(self, msg, ratio=None):
        super().__init__(msg)
        self.ratio = ratio


class PairInvalid(FeshrgError):
    """Operator pair fails the smooth Feshbach admissibility conditions."""


# alias used by the feshbach module API
InvalidPair = PairInvalid


class BallViolation(FeshrgError):
    """Kernel family left the contraction ball."""

    def __init__(self, msg, deltas=None, trace=None):
        super().__init__(msg)
        self.deltas = deltas
        self.trace = trace


class MaxItersExceeded(FeshrgError):
    """Iteration budget exhausted before convergence."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


class NewtonDiverged(FeshrgError):
    """Newton inversion failed to converge."""


class OutOfDomain(FeshrgError):
    """Requested point lies outside the analytic bijection domain."""


class ContourCrossesSpectrum(FeshrgError):
    """Riesz contour radius does not separate the target eigenvalue."""


class DegenerateGroundState(FeshrgError):
    """Lowest eigenvalue is not simple."""


class TrackingLost(FeshrgError):
    """Eigenvector continuation overlap dropped below threshold."""


class WindowTooSmall(FeshrgError):
    """Decay fit window contains too few grid points."""
