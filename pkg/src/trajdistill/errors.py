"""Exception classes shared across the package.

The CLI maps these onto its exit-code contract: config errors exit 2,
I/O and file-format errors exit 3, numeric failures exit 4, and
store/dataset compatibility failures exit 5.
"""


class TrajDistillError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(TrajDistillError):
    """Tensor shapes are inconsistent with an operation's contract."""


class AutodiffError(TrajDistillError):
    """Misuse of the gradient tape (consumed tape, foreign tensor, ...)."""


class FormatError(TrajDistillError):
    """A binary or text artifact is malformed (bad magic, version, truncation)."""


class ConfigError(TrajDistillError):
    """Invalid configuration values or flags."""


class NumericError(TrajDistillError):
    """A computation produced NaN/Inf where finite values are required."""


class CompatibilityError(TrajDistillError):
    """Two artifacts (e.g. trajectory store and dataset) do not fit together."""
