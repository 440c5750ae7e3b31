"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: InputError -> 2,
CompatibilityError -> 3, DivergenceError -> 4.
"""


class ActivatedSRError(Exception):
    """Base class for all package errors."""


class InputError(ActivatedSRError):
    """Invalid input data: bad shapes, missing files, out-of-range values."""


class CompatibilityError(ActivatedSRError):
    """Mismatched artifacts: extractor fingerprints, architectures, scales."""


class DivergenceError(ActivatedSRError):
    """Optimization produced a non-finite loss."""


class UndefinedCorrelationError(ActivatedSRError):
    """Correlation requested between two constant filters."""
