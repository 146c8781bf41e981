"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError (and
ShapeError surfacing from bad data/architecture combinations) -> 2,
CheckFailure -> 3.
"""


class DamtlError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DamtlError):
    """Tensor shapes (or class indices) incompatible with an operation."""


class DataError(DamtlError):
    """Malformed data files, infeasible split specs, or empty splits."""


class MaskConstraintError(DamtlError):
    """A soft mask violated its non-negativity contract."""


class ConfigError(DamtlError):
    """Invalid, missing, or unknown configuration."""


class CheckFailure(DamtlError):
    """A verification battery (e.g. gradient check) did not pass."""
