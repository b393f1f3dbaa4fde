"""Exception types shared across the package.

The CLI maps each family onto a distinct exit code, so new errors should
subclass one of these rather than raising bare ``ValueError``.
"""


class FrugalMapError(Exception):
    """Base class for all package errors."""


class ParseError(FrugalMapError):
    """A network, factor-graph, table or protocol file could not be read."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)


class ValidationError(FrugalMapError, ValueError):
    """Inputs are well formed but inconsistent (unknown variable, bad query, ...)."""


class ResourceError(FrugalMapError):
    """Exact computation would exceed the configured cell budget."""

    def __init__(self, message, cells=None, budget=None):
        self.cells = cells
        self.budget = budget
        super().__init__(message)


class StaleTableError(ValidationError):
    """A relevance table was built for a different network."""
