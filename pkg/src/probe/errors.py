"""Exception hierarchy shared by every module.

Validation problems derive from ``ValueError`` (CLI exit code 2), numerical
failures from ``ArithmeticError`` (CLI exit code 3).
"""


class ProbeError(Exception):
    """Base class for library errors."""


class DomainError(ProbeError, ValueError):
    """A model-function value outside the domain of the log loss."""


class DataError(ProbeError, ValueError):
    """Malformed, empty or degenerate input data."""


class ConfigError(ProbeError, ValueError):
    """Configuration that violates the schema."""


class UnseenConditionError(DataError, KeyError):
    """Query for a conditioning value that never occurred in training data."""

    def __str__(self):
        return Exception.__str__(self)


class NumericError(ProbeError, ArithmeticError):
    """Non-finite intermediate or other numerical breakdown."""


class UnderflowError(NumericError):
    """A density collapsed below the representable threshold."""


class StiffnessError(NumericError):
    """Adaptive step halving exhausted its budget."""
