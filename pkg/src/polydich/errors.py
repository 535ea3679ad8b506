"""Exception hierarchy.

Every error carries enough context to be reported by the CLI with exit code 1
(misuse) or 2 (analysis-negative).
"""


class PolyDichError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PolyDichError, ValueError):
    """Invalid parameters, malformed files or inconsistent settings."""


class IndexRangeError(PolyDichError, IndexError):
    """A time index lies outside the materialized horizon."""


class DomainError(PolyDichError, ValueError):
    """A sequence does not belong to the space an operator expects."""


class UnstableRestrictionError(PolyDichError):
    """The cocycle restricted to the unstable subspace is not invertible."""


class SpectralGapError(PolyDichError):
    """Growth exponents do not separate into stable and unstable directions."""


class TransversalityError(PolyDichError):
    """Stable and unstable subspaces are not numerically complementary."""


class CertificateError(PolyDichError):
    """A certificate fails one of its defining identities."""


class NoDecayError(PolyDichError):
    """Fitted polynomial rate is not positive."""


class VanishingOrbitError(PolyDichError):
    """An orbit hits zero where a normalization needs it nonzero."""


class BudgetError(PolyDichError):
    """An explicit perturbation exceeds the polynomial budget."""

    def __init__(self, msg, worst_index):
        super().__init__(msg)
        self.worst_index = worst_index
