"""Exception types shared across the package."""


class CurvflowError(Exception):
    """Base class for all errors raised by curvflow."""


class DimensionMismatchError(CurvflowError, ValueError):
    """A per-vertex field does not match the surface vertex count."""


class NumericRangeError(CurvflowError, FloatingPointError):
    """A conformal factor produced overflow or non-finite values."""


class MeshError(CurvflowError, ValueError):
    """Base class for mesh input problems."""


class MeshFormatError(MeshError):
    """Unreadable or malformed mesh file."""


class MeshTopologyError(MeshError):
    """Mesh is not a closed, oriented, connected triangle surface."""


class NonSPDSystemError(CurvflowError, RuntimeError):
    """Implicit step matrix lost positive definiteness.

    Carries the smallest eigenvalue estimate of the offending matrix.
    """

    def __init__(self, message: str, min_eig: float):
        super().__init__(f"{message} (smallest eigenvalue estimate {min_eig:.6e})")
        self.min_eig = min_eig


class SolverError(CurvflowError, RuntimeError):
    """A linear solve failed to meet its residual contract."""


class ConvergenceError(CurvflowError, RuntimeError):
    """An iteration stagnated.  ``best`` holds the last iterate."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best
