"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: InsufficientElementsError -> 2,
DegenerateGeometryError -> 3, ConfigError -> 4, everything else -> 1.
"""


class SemlocError(Exception):
    """Base class for all package errors."""


class DomainError(SemlocError, ValueError):
    """An argument violates a documented precondition or invariant."""


class DegenerateGeometryError(SemlocError):
    """Geometry too degenerate to produce a meaningful answer."""


class UnreliableDepthError(DegenerateGeometryError):
    """Triangulation rays too close to parallel for a stable depth."""


class DegenerateProblemError(DegenerateGeometryError):
    """Optimization problem is singular or hopelessly ill-conditioned."""


class InsufficientElementsError(SemlocError):
    """Fewer elements/matches/correspondences than the pipeline needs."""


class InsufficientMatchesError(InsufficientElementsError):
    """Fewer than the minimum candidate matches for pose search."""


class ConfigError(SemlocError):
    """Invalid configuration, weight shapes, or file schema/version."""
