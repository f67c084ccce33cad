"""Exception hierarchy shared across the package."""


class CseFslError(Exception):
    pass


class ConfigError(CseFslError, ValueError):
    """Invalid model spec, strategy or experiment configuration."""


class UsageError(CseFslError, ValueError):
    """An operation was called with arguments that violate its contract."""


class DataError(CseFslError, ValueError):
    """Malformed or inconsistent data."""


class ParseError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(CseFslError, RuntimeError):
    """A message arrived that the client/server state machine cannot accept."""


class NumericError(CseFslError, ArithmeticError):
    """Non-finite values appeared during training."""
