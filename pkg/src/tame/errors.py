"""Exception hierarchy shared across the package."""


class TameError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TameError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(TameError, ArithmeticError):
    """A non-finite or out-of-domain value was encountered."""


class ContractError(TameError, ValueError):
    """A precondition on the arguments of an operation was violated."""


class ConfigError(TameError, ValueError):
    """A configuration is internally inconsistent."""


class IngestionError(TameError):
    """A dataset entry could not be loaded or validated."""
