"""Exception hierarchy. Every error raised on purpose by the package derives from MDPError."""


class MDPError(Exception):
    pass


class ConfigurationError(MDPError, ValueError):
    """Bad dimensions, invalid parameters or a malformed run configuration."""


class NumericalBlowupError(MDPError, FloatingPointError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state encountered at step {step}")


class UnsupportedModelError(MDPError):
    pass


class InstabilityError(MDPError, ValueError):
    pass


class InsufficientDataError(MDPError, ValueError):
    pass


class PlanInfeasibleError(MDPError):
    def __init__(self, message, feasible_cells=()):
        self.feasible_cells = list(feasible_cells)
        super().__init__(message)


class ValidityError(MDPError, ValueError):
    pass


class DeltaTooLargeError(MDPError, ValueError):
    """The requested exponential moment does not exist (or cannot be estimated stably)."""


class ExponentOverflowError(MDPError, OverflowError):
    pass


class DegenerateDesignError(MDPError, ValueError):
    """A regression denominator vanished, so the estimator is undefined."""
