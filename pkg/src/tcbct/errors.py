"""Exception hierarchy shared by the library and the command-line front end."""


class TcbctError(Exception):
    """Base class for all errors raised by tcbct."""


class ConfigError(TcbctError, ValueError):
    """Invalid geometry, grid, or solver configuration."""


class GeometryMismatchError(ConfigError):
    """Two objects that must share a geometry or grid do not."""


class FormatError(TcbctError, OSError):
    """A file does not follow the tcbct container layout."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class DivergenceError(TcbctError, ArithmeticError):
    """A solver produced non-finite values."""
