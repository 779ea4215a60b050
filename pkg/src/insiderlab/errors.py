"""Exception hierarchy shared by the simulation modules and the CLI."""


class InsiderLabError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(InsiderLabError, ValueError):
    """A parameter violates a module precondition."""


class ConsistencyError(InsiderLabError):
    """A cross-check between two estimates failed (e.g. disagreeing verdicts)."""


class InsufficientDataError(InsiderLabError):
    """A conditional estimate was requested on an empty set of paths."""
