"""Exception types that map to CLI exit codes."""


class ConfigError(ValueError):
    """Bad or inconsistent configuration (exit code 2)."""


class NumericError(FloatingPointError):
    """Non-finite loss, gradient or state (exit code 3)."""
