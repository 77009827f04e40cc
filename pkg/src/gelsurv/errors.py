"""Exception hierarchy shared across the package.

Two families matter to callers: :class:`InputError` covers bad data or
configuration (the CLI maps these to exit code 2) while
:class:`NumericalError` covers failures inside the estimation pipeline
(exit code 1).
"""

from __future__ import annotations


class GelSurvError(Exception):
    """Base class for all package errors."""


class InputError(GelSurvError):
    """Invalid user input: data files, schemas or configuration."""


class SchemaError(InputError):
    """A column named by the schema is missing from the data file."""


class ParseError(InputError):
    """A cell could not be parsed as a finite number."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class ValidationError(InputError):
    """Parsed values violate a structural invariant."""


class ConfigError(InputError):
    """Malformed or unknown configuration entries."""


class NumericalError(GelSurvError):
    """Failure inside a numerical routine."""


class DegenerateNeighborhoodError(NumericalError):
    """All kernel weights vanished for a query point."""

    def __init__(self, message: str, query_index: int | None = None):
        super().__init__(message)
        self.query_index = query_index


class AllCensoredError(NumericalError):
    """No uncensored observation is available to build the moments."""


class DivergenceError(NumericalError):
    """Training of a learner produced a non-finite loss."""


class ConvergenceError(NumericalError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message: str, grad_norm: float | None = None, beta: float | None = None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.beta = beta


class DomainError(NumericalError):
    """Argument outside the domain of a ρ family."""


class WeakIdentificationError(NumericalError):
    """Identification fails in sample (vanishing slope or curvature)."""


class ExactIdentificationError(NumericalError):
    """Over-identification test requested with a single moment."""


class RankDeficiencyError(NumericalError):
    """Design matrix is rank deficient."""

    def __init__(self, message: str, columns: list[int] | None = None):
        super().__init__(message)
        self.columns = columns or []
