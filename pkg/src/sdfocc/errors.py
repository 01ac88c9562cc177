"""Exception types shared across the package."""


class SdfOccError(Exception):
    pass


class StructuralError(SdfOccError, KeyError):
    """Unknown node id or malformed tape."""


class DomainError(SdfOccError, ValueError):
    """Argument outside the operation's domain."""


class BehindCameraError(DomainError):
    pass


class EmptyRayError(DomainError):
    """Ray does not intersect the volume."""


class NumericError(SdfOccError, ArithmeticError):
    """Non-finite value where a finite one is required."""


class ParseError(SdfOccError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(SdfOccError, ValueError):
    pass
