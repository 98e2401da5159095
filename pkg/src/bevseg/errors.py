"""Shared exception types.

The CLI maps these onto process exit codes, so the split matters:
config problems are the caller's fault, data problems live on disk, and
numeric problems mean the math went sideways at runtime.
"""


class BevsegError(Exception):
    """Base class for everything raised on purpose by this package."""


class ConfigError(BevsegError):
    """Invalid configuration value or inconsistent combination of options."""


class DataError(BevsegError):
    """Dataset or file content is missing, malformed, or inconsistent."""


class NumericError(BevsegError):
    """A numeric invariant failed (non-finite loss, failed gradient check, ...)."""
