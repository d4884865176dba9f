"""Exception hierarchy.

Configuration problems and numerical failures are kept apart so the CLI can
map them to distinct exit codes.
"""


class ConfigError(ValueError):
    """Invalid scenario or experiment configuration."""

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class NumericalError(ArithmeticError):
    """Base class for numerical failures (exit code 3 in the CLI)."""


class FactorizationError(NumericalError):
    """A covariance matrix could not be factorized."""


class SingularSystemError(NumericalError):
    def __init__(self, message, rcond=None):
        self.rcond = rcond
        super().__init__(message if rcond is None else f"{message} (rcond={rcond:.3e})")


class InfeasibleError(NumericalError):
    """SINR targets cannot be met (spectral radius >= 1 or divergence)."""

    def __init__(self, message, rho=None, index=None):
        self.rho = rho
        self.index = index
        super().__init__(message)


class ConvergenceError(NumericalError):
    """Iterative solver hit max_iter; ``last`` holds the final iterate."""

    def __init__(self, message, last=None, index=None):
        self.last = last
        self.index = index
        super().__init__(message)
