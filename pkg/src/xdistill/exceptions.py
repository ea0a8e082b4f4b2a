"""Exception types shared across the package."""


class XDistillError(Exception):
    """Base class for all package errors."""


class DimensionError(XDistillError, ValueError):
    """Operand shapes are incompatible."""


class NumericFaultError(XDistillError, ArithmeticError):
    """A computation produced (or would produce) a non-finite value."""


class ContractError(XDistillError, ValueError):
    """A precondition on arguments or object state was violated."""


class FormatError(XDistillError, ValueError):
    """A file does not follow the expected binary or JSON layout."""
