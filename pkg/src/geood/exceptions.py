"""Exception hierarchy.

The CLI maps these onto exit codes: :class:`DataError` is a usage/IO
problem (exit 2), everything else derived from :class:`GeoodError` is a
computation failure (exit 1).
"""


class GeoodError(Exception):
    """Base class for all errors raised by this package."""


class DataError(GeoodError, ValueError):
    """Malformed, inconsistent or missing input data."""


class ComputationError(GeoodError, ArithmeticError):
    """A numerical step failed (non-finite output, singular system, ...)."""


class FingerprintMismatch(GeoodError, ValueError):
    """Scoring was attempted with a transform that differs from the fitted one."""
