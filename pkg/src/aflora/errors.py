"""Exception types shared across the package."""


class AfloraError(Exception):
    """Base class for all package errors."""


class DimensionError(AfloraError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(AfloraError, RuntimeError):
    """A precondition of an operation was violated."""


class ConfigError(AfloraError, ValueError):
    """A configuration value is invalid or inconsistent.

    ``line`` is set when the error can be anchored to a line of a config file.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ScheduleError(ConfigError):
    """The freezing schedule has no room between warm-up and plateau."""
