"""Exception and warning types raised across the package."""


class GGRegError(Exception):
    """Base class for all package errors."""


class NonFiniteInput(GGRegError, ValueError):
    pass


class DimensionMismatch(GGRegError, ValueError):
    pass


class EmptyGrid(GGRegError, ValueError):
    pass


class AllFitsDegenerate(GGRegError):
    """Every candidate on a tuning grid interpolated the response exactly."""


class SupportTooLarge(GGRegError, ValueError):
    pass


class InvalidSparsity(GGRegError, ValueError):
    pass


class ZeroScale(GGRegError, ValueError):
    pass


class DegenerateRow(GGRegError):
    pass


class NotPositiveDefinite(GGRegError):
    """Cholesky factorization of a precision matrix failed.

    The covariate vector that produced the matrix is kept in ``u``.
    """

    def __init__(self, message, u=None):
        super().__init__(message)
        self.u = u


class PipelineAbort(GGRegError):
    pass


class DidNotConverge(UserWarning):
    """Solver hit ``max_iterations`` before meeting its stopping rule."""
