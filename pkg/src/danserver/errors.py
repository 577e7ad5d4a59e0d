"""Exception hierarchy shared by every layer of the server.

Errors that can cross the wire carry the numeric code sent in ERROR frames.
"""

NOT_FOUND = 1
BACKEND_UNAVAILABLE = 2
OVERLOADED = 3
MALFORMED = 4
TIMEOUT = 5
INTERNAL = 6

ERROR_NAMES = {
    NOT_FOUND: "NOT_FOUND",
    BACKEND_UNAVAILABLE: "BACKEND_UNAVAILABLE",
    OVERLOADED: "OVERLOADED",
    MALFORMED: "MALFORMED",
    TIMEOUT: "TIMEOUT",
    INTERNAL: "INTERNAL",
}


class DanError(Exception):
    """Base class. ``code`` is the wire error code used when relayed."""

    code = INTERNAL


class NotFound(DanError):
    code = NOT_FOUND


class BackendUnavailable(DanError):
    code = BACKEND_UNAVAILABLE


class Overloaded(DanError):
    code = OVERLOADED


class Malformed(DanError):
    code = MALFORMED


class FetchTimeout(DanError):
    code = TIMEOUT


class InternalError(DanError):
    code = INTERNAL


class PoolTimeout(FetchTimeout):
    """No backend session slot freed up within the acquire timeout."""


class LimitExceeded(DanError):
    """A length or size field would overflow its encoding."""


class CorruptObject(DanError):
    """Raised by ``decode_object``; ``detail`` names the failed check."""

    def __init__(self, detail: str, message: str = ""):
        super().__init__(f"{detail}: {message}" if message else detail)
        self.detail = detail


class BackendCorrupt(InternalError):
    pass


class SchemaError(InternalError):
    pass


class WormViolation(InternalError):
    """A second, different payload was presented for an existing key."""


class IoFailure(InternalError):
    pass


_BY_CODE = {
    NOT_FOUND: NotFound,
    BACKEND_UNAVAILABLE: BackendUnavailable,
    OVERLOADED: Overloaded,
    MALFORMED: Malformed,
    TIMEOUT: FetchTimeout,
    INTERNAL: InternalError,
}


def error_for_code(code: int, message: str) -> DanError:
    return _BY_CODE.get(code, InternalError)(message)
