"""
Exception hierarchy shared by the laboratory modules.

Module-specific errors subclass MixerError next to the code that raises them;
only the base class and configuration errors live here.
"""


class MixerError(Exception):
    """Base class for every error raised by mixer_lab."""


class ConfigError(MixerError):
    """Raised when a configuration file or flag fails validation."""
