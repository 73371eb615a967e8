"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are invalid for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite / out-of-domain values."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class ConfigError(ValueError):
    """A configuration is malformed, contains unknown keys, or is infeasible."""


class DataError(ValueError):
    """An input file is malformed or inconsistent."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    Carries the last parameter snapshot known to be finite so the caller
    can persist it before giving up.
    """

    def __init__(self, message, last_good_values=None):
        super().__init__(message)
        self.last_good_values = last_good_values
