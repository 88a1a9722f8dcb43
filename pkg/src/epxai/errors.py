"""Shared exception base for the package.

Every module defines its own exception family (data errors, model errors,
attribution errors, ...) deriving from :class:`EpxaiError`, so callers can
catch the whole family or a single condition.
"""


class EpxaiError(Exception):
    """Base class for all errors raised by this package."""
