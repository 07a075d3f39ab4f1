"""Exception hierarchy shared by every module."""


class FunnelError(Exception):
    """Base class for all library errors."""


class ShapeError(FunnelError, ValueError):
    pass


class InvalidArgument(FunnelError, ValueError):
    pass


class ConfigError(FunnelError, ValueError):
    pass


class StateError(FunnelError, RuntimeError):
    pass


class NumericError(FunnelError, ArithmeticError):
    pass


class FormatError(FunnelError, ValueError):
    """Malformed binary or text input. ``offset`` is the byte/line position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(FunnelError, ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))
