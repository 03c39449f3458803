"""Exception hierarchy shared by every simulator module."""


class MsmaError(Exception):
    """Base class for all simulator errors."""


class ConfigError(MsmaError):
    """Configuration or scenario document could not be used."""


class ParseError(ConfigError):
    """Malformed document. Carries the offending line and/or field when known."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class ValidationError(ConfigError):
    """Well-formed document that violates an invariant."""


class GeometryError(MsmaError):
    pass


class UnknownFrame(GeometryError):
    pass


class DisconnectedFrames(GeometryError):
    pass


class TickOutOfRange(MsmaError):
    pass


class NumericalError(MsmaError):
    pass


class SingularInnovation(NumericalError):
    """Innovation covariance is numerically singular."""


class SingularCovariance(NumericalError):
    pass


class RunError(MsmaError):
    """A module error re-raised with the run it happened in."""

    def __init__(self, message, context=None):
        self.context = dict(context or {})
        details = ", ".join(f"{k}={v}" for k, v in self.context.items())
        super().__init__(f"{message} [{details}]" if details else message)
