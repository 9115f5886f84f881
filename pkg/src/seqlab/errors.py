"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SeqlabError(Exception):
    exit_code = 1


class PreconditionError(SeqlabError, ValueError):
    exit_code = 2


class DomainError(PreconditionError):
    """A density evaluated to zero or a non-finite value on the data."""


class NumericError(SeqlabError, ArithmeticError):
    exit_code = 3


class ConvergenceError(NumericError):
    pass


class CalibrationError(NumericError):
    pass


class CapacityError(SeqlabError):
    exit_code = 4
