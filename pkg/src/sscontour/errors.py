"""Exceptions shared across modules."""


class FormatError(ValueError):
    """An artifact file has the wrong magic, version or layout."""
