"""Exception types shared across the package."""


class ScaeError(Exception):
    """Base class for all package errors."""


class DimensionError(ScaeError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class NumericError(ScaeError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class ContractError(ScaeError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class AlgorithmError(ScaeError, RuntimeError):
    """An iterative algorithm failed to converge."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class ParseError(ScaeError, ValueError):
    """Malformed input file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DecodeError(ScaeError, ValueError):
    """Corrupt or truncated entropy-coded stream."""


class ConfigError(ScaeError, ValueError):
    """Invalid run configuration."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
