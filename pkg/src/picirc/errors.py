"""Exception types shared across the package.

Argument misuse raises the builtin ``ValueError``/``TypeError``; the classes
here cover failures that callers may reasonably want to catch separately:
malformed files, numeric breakdown, structural violations, and blown size
guards.
"""


class PicircError(Exception):
    """Base class for package-specific failures."""


class SchemaError(PicircError):
    """A file or JSON payload does not match the expected format."""


class CircuitError(PicircError):
    """A circuit violates a structural invariant (cycle, bad scope, ...)."""


class UnsupportedStructureError(PicircError):
    """The circuit is valid but outside what this operation handles."""


class NumericError(PicircError):
    """A computation produced a non-finite value where one is not allowed."""


class SizeError(PicircError):
    """An operation would materialize more units than the configured guard."""
