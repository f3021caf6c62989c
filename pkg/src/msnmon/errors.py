"""Exception taxonomy shared across the package."""


class MsnmonError(Exception):
    """Base class for all package errors."""


class InvalidData(MsnmonError):
    """Input data violates a numeric precondition (non-finite, too few rows)."""


class DimensionError(MsnmonError):
    """Vector/matrix shapes do not line up."""


class RankError(MsnmonError):
    """Requested component count exceeds the usable rank of the data."""


class ConfigError(MsnmonError):
    """Malformed or inconsistent configuration."""


class ParseWarning(MsnmonError):
    """A raw line could not be parsed.  Counted and skipped, never fatal."""


class ProtocolError(MsnmonError):
    """A wire line could not be decoded.  The connection survives."""


class Unreachable(MsnmonError):
    """A peer could not be reached within the retry budget."""


class NotFound(MsnmonError):
    """A referenced sensor or window does not exist."""
