"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: validation/config problems
exit 1, numeric trouble exits 2, threshold failures exit 3.
"""


class AnatomistError(Exception):
    """Base class for all package errors."""


class ConfigError(AnatomistError):
    """Bad config file, bad lexicon file, or invalid option combination."""


class ValidationError(AnatomistError):
    """Input violates a documented precondition or invariant."""


class ShapeError(ValidationError):
    """Tensor or matrix dimensions are incompatible."""


class LengthError(ValidationError):
    """Sequence exceeds the configured maximum length."""


class IngestionError(ValidationError):
    """A corpus file could not be parsed; message names the line."""


class UsageError(AnatomistError):
    """API misuse, e.g. backward() on a tensor with no recorded graph."""


class NumericError(AnatomistError):
    """Numeric-domain failure: zero norms, log of non-positive values."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""
