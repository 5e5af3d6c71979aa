"""Exception types shared across the package."""


class CapslabError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(CapslabError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class ConfigurationError(CapslabError, ValueError):
    """A spec, config file, or layer parameterization is invalid."""


class NumericsError(CapslabError, ArithmeticError):
    """An operation would produce non-finite values (division by zero,
    log of a non-positive number, overflow)."""


class ContractError(CapslabError, RuntimeError):
    """A call violated an API precondition (non-scalar loss, unregistered
    telemetry layer, empty epoch)."""


class DataFormatError(CapslabError, ValueError):
    """An input file does not match its declared binary format."""
