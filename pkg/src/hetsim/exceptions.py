"""Exception hierarchy; each maps to a CLI exit code."""


class HetsimError(Exception):
    exit_code = 1


class ConfigurationError(HetsimError, ValueError):
    exit_code = 2


class CapacityError(HetsimError, RuntimeError):
    exit_code = 3


class NumericalError(HetsimError, ArithmeticError):
    exit_code = 4


class StructuralError(NumericalError):
    """The truncated chain is reducible."""
