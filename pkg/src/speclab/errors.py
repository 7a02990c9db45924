"""Exception types shared across the package."""


class SpecLabError(Exception):
    """Base class for all package errors."""


class InputError(SpecLabError):
    """Invalid data passed to an operation: bad token ids, spans, empty inputs."""


class ConfigError(SpecLabError):
    """Invalid or inconsistent configuration."""


class InternalError(SpecLabError):
    """An internal invariant was violated; indicates a bug, not bad input."""
