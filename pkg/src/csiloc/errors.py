"""Exception hierarchy. The CLI maps CsilocError to exit code 1."""


class CsilocError(Exception):
    """Base for all errors this package raises on bad input or state."""


class ConfigError(CsilocError):
    """A configuration value or combination the pipeline cannot honor."""
