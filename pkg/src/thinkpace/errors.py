"""Exception types shared across the package."""

from __future__ import annotations


class ThinkpaceError(Exception):
    """Base class for all errors raised by this package."""


class ScenarioError(ThinkpaceError):
    """A scenario file is missing, malformed, or inconsistent with a run."""


class ConfigError(ThinkpaceError):
    """Invalid configuration (file, flag, or field value)."""


class BackendError(ThinkpaceError):
    """A token generator failed.

    ``retriable`` distinguishes transient transport faults from fatal
    configuration/state errors (e.g. an exhausted script).
    """

    def __init__(self, message: str, *, retriable: bool = False):
        super().__init__(message)
        self.retriable = retriable


class ContractViolation(ThinkpaceError):
    """An operation was called outside its documented contract."""


class InvariantError(RuntimeError):
    """Internal scheduler invariant broke; always a bug, never recoverable."""
