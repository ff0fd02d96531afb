"""Exception types shared across the package.

The CLI maps :class:`SemisiamError` subclasses to exit code 1; anything
else (usage problems, missing config) exits with 2.
"""


class SemisiamError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SemisiamError):
    """A configuration violates one of its invariants."""


class DatasetError(SemisiamError):
    """A dataset operation received invalid inputs or state."""


class DegenerateBatchError(SemisiamError):
    """A loss batch has no valid anchors."""


class CheckpointMismatchError(SemisiamError):
    """A checkpoint was produced under a different configuration."""
