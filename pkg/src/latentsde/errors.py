"""Exception types shared across the package.

Every error raised by library code derives from :class:`LatentSdeError` so
callers can catch package failures with a single except clause.  The CLI
maps :class:`SchemaError` / :class:`InvalidArgumentError` to exit code 2.
"""

from __future__ import annotations


class LatentSdeError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgumentError(LatentSdeError, ValueError):
    """An argument violates a documented precondition (shape, range, ...)."""


class NumericalError(LatentSdeError, RuntimeError):
    """A linear-algebra operation failed beyond recoverable jitter.

    Attributes
    ----------
    attempted_jitter : float
        The largest diagonal jitter that was tried before giving up.
    """

    def __init__(self, message: str, attempted_jitter: float = 0.0):
        super().__init__(message)
        self.attempted_jitter = attempted_jitter


class DivergenceError(LatentSdeError, RuntimeError):
    """A forward moment integration blew up.

    Attributes
    ----------
    step : int
        Grid index at which the divergence was detected.
    trial : int or None
        Trial index, filled in by multi-trial drivers.
    """

    def __init__(self, message: str, step: int = -1, trial: int | None = None):
        super().__init__(message)
        self.step = step
        self.trial = trial


class StaleCacheError(LatentSdeError, RuntimeError):
    """A cached factorization was used after a structural parameter changed."""


class SchemaError(LatentSdeError, ValueError):
    """A serialized file does not match its schema.

    Attributes
    ----------
    field : str
        Dotted path of the offending field, e.g. ``"trials[3].times"``.
    """

    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field
