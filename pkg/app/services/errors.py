"""Exception types raised by the boundary-element services."""

from typing import Optional


class BemError(Exception):
    """Base class for every error raised by the solver services"""


class MeshParseError(BemError, ValueError):
    """Malformed mesh file"""


class MeshValidationError(BemError, ValueError):
    """Mesh violates a closed/oriented/non-degenerate surface invariant"""

    def __init__(self, message: str, element_index: Optional[int] = None):
        super().__init__(message)
        self.element_index = element_index


class PartitionError(BemError, ValueError):
    """Boundary labelling is inconsistent or unusable for a mixed solve"""


class QuadratureError(BemError, ValueError):
    """Unsupported quadrature order or pair class"""


class KernelSingularityError(BemError, ValueError):
    """Kernel evaluated at (numerically) coincident points"""


class DofCapError(BemError, ValueError):
    """Dense matrix would exceed the configured dof cap"""


class NearBoundaryError(BemError, ValueError):
    """Evaluation point or source too close to the boundary (or on the wrong side)"""


class MeasureError(BemError, ValueError):
    """Invalid measure data or diagnostic parameters"""


class SolverError(BemError):
    """Linear solve failed"""


class NearSingularError(SolverError):
    """A block (or the Schur complement) is numerically singular"""

    def __init__(self, message: str, condition_estimate: float):
        super().__init__(message)
        self.condition_estimate = condition_estimate


class ProblemDefinitionError(BemError, ValueError):
    """Mixed problem data are inconsistent (wrong spaces, exterior volume source, ...)"""
