"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise the
most specific one that applies rather than bare ValueError/RuntimeError.
"""


class ShapeError(ValueError):
    """Operands have incompatible or malformed dimensions."""


class ConfigError(ValueError):
    """A configuration value is unknown, malformed, or out of range."""


class DataError(ValueError):
    """A file or payload is corrupt, truncated, or violates its format."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values (diverged or overflowed)."""
