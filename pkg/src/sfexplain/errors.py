"""Shared exception base so the CLI can turn library failures into exit codes."""


class SfexplainError(Exception):
    """Base class for all errors raised by this package."""
