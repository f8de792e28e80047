"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value(s)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""
