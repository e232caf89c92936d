"""Exception types shared across the package.

Two failure families matter to callers: bad inputs (files, flags,
domain violations) and numerical breakdowns (singular systems,
overflow, non-convergence). The CLI maps them to exit codes 1 and 2.
"""


class ExceedmapError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ExceedmapError):
    """Invalid input data, schema, or parameter values."""


class NumericalError(ExceedmapError):
    """A numerical procedure failed (singular matrix, overflow, no convergence)."""
