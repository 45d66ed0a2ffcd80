"""Exception hierarchy mirroring the CLI exit codes."""


class HpmsimError(Exception):
    """Base class for all package errors."""


class ValidationError(HpmsimError):
    """Invalid input or a violated precondition (CLI exit code 2)."""


class BoundViolation(HpmsimError):
    """A proved bound failed on measured data (CLI exit code 1)."""


class NumericalError(HpmsimError):
    """Iteration or solver failure (CLI exit code 3)."""
