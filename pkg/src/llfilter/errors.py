"""Exception hierarchy shared by the filter, simulation and benchmark code."""


class LLFilterError(Exception):
    """Base class for all package errors."""


class ModelError(LLFilterError, ValueError):
    """A state or observation model is malformed or inconsistent."""


class ConfigurationError(LLFilterError, ValueError):
    """Invalid combination of options (e.g. beta=2 on a model without Hessians)."""


class SingularInnovationError(LLFilterError, ArithmeticError):
    """The innovation covariance C V C^T + Sigma could not be factorized."""


class ExpmError(LLFilterError, ArithmeticError):
    """The matrix exponential overflowed or produced non-finite entries."""


class DivergenceError(LLFilterError, ArithmeticError):
    """Propagated moments became non-finite or lost positive semi-definiteness.

    Attributes
    ----------
    time : float or None
        Grid node (or simulation time) at which the failure was detected.
    """

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time
