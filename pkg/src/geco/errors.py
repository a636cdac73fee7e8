class GecoError(Exception):
    """Base class for package errors."""


class ConfigError(GecoError, ValueError):
    """Invalid configuration or network spec."""


class DimensionError(GecoError, ValueError):
    """Array shapes disagree with the network or task contract."""


class FormatError(GecoError, ValueError):
    """Malformed checkpoint or record stream."""


class DivergenceError(GecoError, FloatingPointError):
    """A loss, gradient or iterate became non-finite."""


class OracleUndefinedError(GecoError, ArithmeticError):
    """Posterior mass underflowed; the oracle field is undefined at this point."""
