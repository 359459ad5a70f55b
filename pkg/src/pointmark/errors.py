"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's stated preconditions."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but degenerate (zero extent, zero norm)."""


class NumericFailureError(RuntimeError):
    """A numeric computation produced NaN/Inf; message names the site."""


class CloudParseError(ValueError):
    """A point-cloud file could not be parsed; message carries the line number."""


class ManifestValidationError(ValueError):
    """A dataset manifest is internally inconsistent or references missing data."""
