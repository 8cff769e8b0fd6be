"""Exception types shared across the package.

The CLI maps these onto process exit codes (usage 2, data 3, numerical 4).
"""


class GridslideError(Exception):
    pass


class ShapeError(GridslideError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(GridslideError, ValueError):
    """A hyperparameter or option is out of its valid range."""


class DataError(GridslideError, ValueError):
    """Input data violates a precondition (empty tissue, duplicates, bad file)."""


class NumericalError(GridslideError, ArithmeticError):
    """Training produced a non-finite value."""


class MetricUndefined(GridslideError, ValueError):
    """A metric has no value on the given input (e.g. single-class AUROC)."""
