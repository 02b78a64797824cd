"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class EmptySelectionError(DomainError):
    """A component subset selection was empty."""


class InvalidRangeError(DomainError):
    """A (sigma_min, sigma_max) range is empty or inverted."""


class InvalidRhoError(DomainError):
    """Polynomial grid exponent rho must be positive."""


class MissingFrameError(ValueError):
    """A flow-parameterized output was converted without its (frame, t) pair."""


class MissingAuxiliaryError(ValueError):
    """Guidance was requested without its unconditional handle or classifier."""


class NumericalDivergenceError(ArithmeticError):
    """NaN/Inf appeared mid-run; carries the step index where it happened."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ParseError(ValueError):
    """Config text could not be parsed; carries the line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(ValueError):
    """Config parsed but failed validation; carries the offending key."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        if key is not None:
            message = f"{key}: {message}"
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.key = key
        self.line = line
