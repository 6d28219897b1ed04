"""Exception hierarchy shared by every stage of the selection engine.

The CLI maps the two branches below onto exit codes: ``InvariantError`` → 2,
``NumericError`` → 3. Everything else derived from ``NasSelectionError`` is a
usage problem (exit 1).
"""


class NasSelectionError(Exception):
    """Base class for all engine errors."""


class ConfigError(NasSelectionError):
    """Invalid configuration key, value or file."""


class InvariantError(NasSelectionError):
    """A structural precondition or invariant was violated."""


class NumericError(NasSelectionError):
    """A computation produced or received non-finite values."""
