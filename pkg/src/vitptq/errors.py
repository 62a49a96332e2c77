"""Exception hierarchy shared by every layer of the package.

The CLI maps these onto its exit codes, so new failure modes should subclass
one of the leaf types below rather than raising bare ``ValueError``.
"""


class VitPTQError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(VitPTQError, ValueError):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class DataFormatError(VitPTQError):
    """A dataset or checkpoint file could not be parsed."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class NumericalError(VitPTQError, ArithmeticError):
    """A computation produced NaN/Inf (e.g. diverging training)."""
