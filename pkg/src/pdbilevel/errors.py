"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shape does not match an operator or bundle domain."""


class ParameterError(ValueError):
    """A hyperparameter is outside its admissible range."""


class SpecError(ValueError):
    """A saddle-point specification violates a structural requirement."""


class FormatError(ValueError):
    """A file (PGM, F64T, config) is malformed."""


class DivergenceError(RuntimeError):
    """Solver iterates became non-finite."""


class OracleSizeError(ValueError):
    """Problem too large for a dense oracle computation."""


class StagnationError(RuntimeError):
    """Descent loop could not make progress at the tolerance floor."""


class ToleranceNotReached(RuntimeError):
    """An iterative solve exhausted its budget before meeting its tolerance.

    Carries the best a-posteriori bounds achieved so callers can report
    or relax.
    """

    def __init__(self, message, best_primal=None, best_dual=None, iters=None):
        super().__init__(message)
        self.best_primal = best_primal
        self.best_dual = best_dual
        self.iters = iters
