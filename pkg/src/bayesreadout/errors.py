"""Exception hierarchy.

Each leaf maps to a distinct CLI exit code (see ``bayesreadout.cli``).
"""


class ReadoutError(Exception):
    """Base class for all library errors."""


class ParameterDomainError(ReadoutError, ValueError):
    """A model parameter or argument lies outside its valid domain."""


class DegenerateWeightsError(ReadoutError, ValueError):
    pass


class NumericalDomainError(ReadoutError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class InvariantViolation(ReadoutError, ValueError):
    pass


class ArchitectureError(ReadoutError, ValueError):
    pass


class TrainingError(NumericalDomainError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class FitDegenerateError(ReadoutError, ValueError):
    pass


class ConfigError(ReadoutError, ValueError):
    """Invalid configuration; ``field`` and ``line`` locate the problem when known."""

    def __init__(self, message, field=None, line=None):
        loc = []
        if field is not None:
            loc.append(f"field {field!r}")
        if line is not None:
            loc.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.field = field
        self.line = line


class CalibrationRequiredError(ReadoutError):
    pass


class DataFormatError(ReadoutError, ValueError):
    """Unreadable, truncated, corrupt, or unsupported-version input file."""
