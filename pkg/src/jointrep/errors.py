"""Exception types shared across the package."""


class JointRepError(Exception):
    """Base class for all errors raised by jointrep."""


class ShapeError(JointRepError, ValueError):
    """Operand shapes are incompatible; the message names the offending op."""

    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class UsageError(JointRepError, RuntimeError):
    """An API was called out of order or with inconsistent arguments."""


class NumericError(JointRepError, ArithmeticError):
    """A computation produced non-finite or otherwise invalid numbers."""


class DomainError(JointRepError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class ConfigError(JointRepError, ValueError):
    """A model or training configuration is inconsistent."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(JointRepError, ValueError):
    """A checkpoint or data file does not match the expected layout."""
