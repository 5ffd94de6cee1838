"""Exception types shared across the package."""


class ShanError(Exception):
    """Base class for all package errors."""


class DimensionError(ShanError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ShanError, ValueError):
    """A scalar or configuration argument is out of range."""


class ContractError(ShanError, RuntimeError):
    """A call violated an API precondition (e.g. non-scalar loss)."""


class EvaluationError(ShanError, ArithmeticError):
    """A numeric evaluation produced a non-finite value."""


class IntegrityError(ShanError, ValueError):
    """Corpus or vocabulary content is inconsistent."""


class FormatError(ShanError, ValueError):
    """An on-disk file does not match its expected layout."""


class LookupFailure(ShanError, KeyError):
    """An image or caption id is not present in a feature pack."""
