"""Exception hierarchy. Each top-level class maps to one CLI exit code."""


class AbregError(Exception):
    exit_code = 1


class ConfigError(AbregError, ValueError):
    exit_code = 2


class DataError(AbregError, ValueError):
    exit_code = 3


class DesignError(DataError):
    """Invalid sampling design or inclusion probabilities."""


class NumericalError(AbregError, ArithmeticError):
    exit_code = 4


class ConvergenceError(NumericalError):
    pass


class SeparationError(NumericalError):
    """Logistic fit diverged (coefficients blew up)."""
