"""Exception types shared across the package."""


class RendezvousError(Exception):
    """Base class for all package errors."""


class DimensionError(RendezvousError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(RendezvousError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(RendezvousError, ArithmeticError):
    """Non-finite values were encountered where finite ones are required."""


class FormatError(RendezvousError, ValueError):
    """An input file or record is malformed."""


class ConfigError(RendezvousError, ValueError):
    """A configuration is invalid or unsatisfiable."""


class DivergenceError(RendezvousError, RuntimeError):
    """Training produced a non-finite loss."""
