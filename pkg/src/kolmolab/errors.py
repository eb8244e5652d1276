"""Exception types shared by every module.

The CLI maps these onto exit codes, so each failure mode has its own class.
"""


class KolmoError(Exception):
    """Base class for all library errors."""


class InputError(KolmoError, ValueError):
    """A parameter or field violates a documented precondition."""


class ResolutionError(KolmoError, ValueError):
    """The grid cannot resolve the requested quantity.

    Parameters
    ----------
    message : str
    t_min : float, optional
        Smallest admissible time for the operation, when one exists.
    """

    def __init__(self, message, t_min=None):
        super().__init__(message)
        self.t_min = t_min


class NumericalError(KolmoError, RuntimeError):
    """A linear solve or quadrature failed to converge.

    ``history`` carries whatever diagnostic trail the caller collected
    (residuals, partial values).
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class SmallnessError(KolmoError, ValueError):
    """A smallness condition needed by a formula does not hold."""


class FitFailure(KolmoError, RuntimeError):
    """An envelope fit is infeasible; ``sample`` names the violating point."""

    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class ConfigError(KolmoError, ValueError):
    """Experiment configuration is malformed or inconsistent."""
