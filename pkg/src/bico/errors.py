"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class NumericError(RuntimeError):
    """Linear algebra failed beyond recoverable jitter."""
