"""Exception hierarchy shared by all diffqp modules."""


class DiffQPError(Exception):
    pass


class DimensionMismatch(DiffQPError, ValueError):
    pass


class ZeroPivot(DiffQPError, ArithmeticError):
    """A pivot fell below the absolute threshold during elimination or update."""


class PositivePivot(DiffQPError, ArithmeticError):
    """Row addition produced a nonnegative pivot in the constraint block."""


class NotPlaceholder(DiffQPError, ValueError):
    pass


class AlreadyPlaceholder(DiffQPError, ValueError):
    pass


class WrongBlock(DiffQPError, ValueError):
    """Only rows of the negative (constraint) block may be deleted."""


class StaleWorkspace(DiffQPError, RuntimeError):
    pass


class SolverFailure(DiffQPError, RuntimeError):
    pass


class EvaluationFailure(DiffQPError, RuntimeError):
    """Raised by a design evaluation that cannot produce a finite objective."""


class Bankruptcy(EvaluationFailure):
    pass


class NoConvergence(DiffQPError, RuntimeError):
    pass


class NonpositiveLevel(DiffQPError, ValueError):
    pass
