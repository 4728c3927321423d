"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or constraint violation."""


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class ParseError(ValueError):
    """Malformed input file; message names the offending row or field."""


class NumericError(ArithmeticError):
    """Non-finite value encountered where finite arithmetic is required."""


class CompatibilityError(ValueError):
    """Checkpoint and runtime configuration disagree; message names the field."""
