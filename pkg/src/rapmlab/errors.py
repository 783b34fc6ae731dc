"""Exception hierarchy shared across the package.

Two broad classes matter to callers (and to the CLI exit codes):
validation problems (bad inputs, violated preconditions) and numerical
failures (a computation that started but could not finish honestly).
"""


class RapmlabError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(RapmlabError, ValueError):
    """Invalid parameters, config values or violated preconditions."""


class NumericalError(RapmlabError, RuntimeError):
    """A numerical procedure failed (stall, lost root, lost parabolicity)."""


class BranchTerminated(NumericalError):
    """A tracked real root ceased to exist (or jumped) inside the range.

    ``where`` is the parameter value at which the branch ends.
    """

    def __init__(self, message: str, where: float):
        super().__init__(message)
        self.where = where


class DenominatorSingularity(NumericalError):
    """A curve integrand denominator crossed zero inside the range."""

    def __init__(self, message: str, where: float):
        super().__init__(message)
        self.where = where


class SupportError(ValidationError):
    """A point left the support of a surface or sampled curve."""


class ParabolicityLost(NumericalError):
    """The parabolicity condition failed at a grid point.

    Carries the location ``(S, t)`` and the offending value of S*u_SS.
    """

    def __init__(self, message: str, S: float, t: float, value: float):
        super().__init__(message)
        self.S = S
        self.t = t
        self.value = value


class PicardStalled(NumericalError):
    """The frozen-coefficient iteration did not converge within its budget."""
