"""Exception types raised across the package."""


class CoopDetError(Exception):
    """Base class for package errors."""


class DimensionError(CoopDetError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(CoopDetError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class NonFiniteError(CoopDetError, ArithmeticError):
    """An operation produced NaN or infinity."""


class EvaluationError(CoopDetError, ArithmeticError):
    """A function under gradient check could not be evaluated."""


class CapacityError(CoopDetError, RuntimeError):
    """Object placement could not be satisfied within the retry budget."""


class ParseError(CoopDetError, ValueError):
    """A serialized record is malformed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
