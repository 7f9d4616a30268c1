"""Exception hierarchy shared by all modules."""


class AcssError(Exception):
    """Base class for all package errors."""


class InvalidArgument(AcssError, ValueError):
    pass


class DomainError(AcssError, ValueError):
    """Parameter outside the model's open parameter space."""


class InfeasiblePoint(AcssError, ValueError):
    """A point violates the constraint system beyond tolerance."""


class InfeasibleProblem(AcssError, ValueError):
    """The constraint system admits no feasible point."""


class Unsupported(AcssError, NotImplementedError):
    pass


class TuningFailed(AcssError, RuntimeError):
    pass


class ParseError(AcssError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
