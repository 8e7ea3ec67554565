"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A supplied parameter violates a documented invariant."""


class DegenerateInputError(ValueError):
    """Input data is too degenerate for the requested quantity (e.g. zero spread)."""


class InsufficientHistoryError(ValueError):
    """A predictor was asked to act on a shorter history than its lag order."""


class FilterInstabilityError(RuntimeError):
    """A recursive filter produced non-finite or runaway values.

    The step index at which the blow-up was detected is carried in ``step``.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class GramFactorizationError(RuntimeError):
    """A kernel Gram matrix could not be Cholesky-factorized within the jitter ladder."""


class TuningError(RuntimeError):
    """Noise-parameter tuning could not produce any usable trial."""
