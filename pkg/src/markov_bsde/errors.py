"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data violates a documented precondition."""


class GridError(ValidationError):
    """Time grid is incompatible with the requested operation."""


class DelaySpecError(ValidationError):
    """Delay functions violate the horizon or change-of-variables bound."""


class PreconditionError(ValidationError):
    """A comparison instance failed one of its gates before or after solving."""


class NumericalError(ArithmeticError):
    """Non-finite values appeared during integration."""


class ConvergenceError(RuntimeError):
    """Picard iteration hit its iteration cap; carries the partial report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report
