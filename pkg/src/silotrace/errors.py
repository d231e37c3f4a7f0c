"""Exception types raised across the package."""


class SilotraceError(Exception):
    """Base class for all package errors."""


class EmptyValue(SilotraceError, ValueError):
    pass


class SchemaMismatch(SilotraceError, ValueError):
    def __init__(self, message, *, key=None, record_number=None):
        if record_number is not None:
            message = f"record {record_number}: {message}"
        super().__init__(message)
        self.key = key
        self.record_number = record_number


class ConfigInvalid(SilotraceError, ValueError):
    pass


class UnknownPlace(SilotraceError, KeyError):
    pass


class ForestViolation(SilotraceError, ValueError):
    """Edge insertion would create a cycle or give a node a second parent."""


class OutOfRange(SilotraceError, ValueError):
    pass


class EmptySet(SilotraceError, ValueError):
    pass


class MalformedPoint(SilotraceError, ValueError):
    pass


class LengthMismatch(SilotraceError, ValueError):
    pass


class DuplicatePlace(SilotraceError, ValueError):
    pass


class TooFewUsers(SilotraceError, ValueError):
    pass


class InvalidEpsilon(SilotraceError, ValueError):
    pass


class MissingProof(SilotraceError, ValueError):
    pass


class NoConsent(SilotraceError, PermissionError):
    pass


class NoChannel(SilotraceError, LookupError):
    pass


class NotListed(SilotraceError, KeyError):
    pass


class ModeUnavailable(SilotraceError, RuntimeError):
    """Operation needs identities that the configured PSI mode hides."""


class ParseError(SilotraceError, ValueError):
    pass


class ValidationError(SilotraceError, ValueError):
    pass


class InvariantViolation(SilotraceError, AssertionError):
    pass
