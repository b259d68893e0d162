"""Exception types shared across the package.

The CLI maps these onto process exit codes; library callers catch them
directly.
"""


class CmesynError(Exception):
    """Base class for all package errors."""


class InputError(CmesynError, ValueError):
    """Invalid argument: dimension mismatch, bad parameter range, etc."""


class DomainError(InputError):
    """A query point lies outside the compact domain X."""


class NumericsError(CmesynError, ArithmeticError):
    """A numerical-consistency invariant was violated beyond tolerance."""


class RegularizationError(CmesynError):
    """Factorization of the regularized Gram system failed."""


class ModelConfigError(CmesynError):
    """System dynamics incompatible with the configured domain."""


class InfeasibilityError(CmesynError):
    """An ambiguity set (or inner problem) has no feasible distribution.

    ``gap`` is how far the minimal quadratic value exceeds the squared
    radius; ``context`` names the offending (state, action) when known.
    """

    def __init__(self, message, gap=None, context=None):
        super().__init__(message)
        self.gap = gap
        self.context = context


class SolverError(CmesynError):
    """Inner convex solve failed to produce a certified result."""


class ConfigError(CmesynError):
    """Run configuration is missing, malformed, or has unknown keys."""


class StageOrderError(CmesynError):
    """A pipeline stage was requested before its inputs exist."""
