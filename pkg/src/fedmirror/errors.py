"""Exception types shared across the package."""


class FedMirrorError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatchError(FedMirrorError):
    """Operands have incompatible dimensions."""


class NonFiniteError(FedMirrorError):
    """A vector contains NaN or infinite entries."""


class DomainError(FedMirrorError):
    """An element-wise operation was applied outside its domain.

    ``index`` points at the first offending element when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EmptyAggregationError(FedMirrorError):
    """An aggregation was requested over an empty collection of updates."""


class DegenerateDirectionError(FedMirrorError):
    """The update direction is zero, so no adaptive step size is defined."""


class BracketExpansionError(FedMirrorError):
    """Root bracketing failed to enclose the target value."""


class SingularSystemError(FedMirrorError):
    """A linear system is numerically singular (condition estimate too large)."""


class InconclusiveError(FedMirrorError):
    """A grid-search oracle hit the search boundary; enlarge the grid to decide."""


class ConfigError(FedMirrorError):
    """An experiment configuration is malformed."""
