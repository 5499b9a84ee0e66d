"""Error codes raised by the security monitor API.

Every failed call raises an SmError subclass and leaves monitor state
untouched (validate-then-mutate discipline; guard conflicts abort before
any effect). The `code` string is what scenario files and traces match on.
"""

from __future__ import annotations


class SmError(Exception):
    """Base class for monitor API failures."""

    code = "Error"

    def __init__(self, message: str = "", rule: str | None = None):
        super().__init__(message or self.code)
        self.rule = rule


# machine model
class AddressOutOfRange(SmError):
    code = "AddressOutOfRange"


class PageFault(SmError):
    code = "PageFault"

    def __init__(self, vaddr: int, kind: str = "read"):
        super().__init__(f"no mapping for 0x{vaddr:x} ({kind})")
        self.vaddr = vaddr
        self.kind = kind


class AccessDenied(SmError):
    code = "Denied"


# resource lifecycle
class NotOwner(SmError):
    code = "NotOwner"


class WrongState(SmError):
    code = "WrongState"


class ConcurrentCall(SmError):
    code = "ConcurrentCall"


class NotOS(SmError):
    code = "NotOS"


class NoSuchDomain(SmError):
    code = "NoSuchDomain"


class NotOffered(SmError):
    code = "NotOffered"


class NoSuchResource(SmError):
    code = "NoSuchResource"


# enclave lifecycle
class BadAddress(SmError):
    code = "BadAddress"


class BadArgument(SmError):
    code = "BadArgument"


class OrderViolation(SmError):
    """Load-order rule broken; `rule` is "order" or "data-before-tables"."""

    code = "OrderViolation"


class AliasViolation(SmError):
    code = "AliasViolation"


class OutOfEnclaveMemory(SmError):
    code = "OutOfEnclaveMemory"


class NoThreads(SmError):
    code = "NoThreads"


class ThreadBusy(SmError):
    code = "ThreadBusy"


class CoreBusy(SmError):
    code = "CoreBusy"


class NotInEnclave(SmError):
    code = "NotInEnclave"


class ThreadsScheduled(SmError):
    code = "ThreadsScheduled"


class NoSuchEnclave(SmError):
    code = "NoSuchEnclave"


# mailboxes / attestation
class NoSuchMailbox(SmError):
    code = "NoSuchMailbox"


class NotAccepting(SmError):
    code = "NotAccepting"


class MessageTooLarge(SmError):
    code = "MessageTooLarge"


class Empty(SmError):
    code = "Empty"


class NotSigningEnclave(SmError):
    code = "NotSigningEnclave"


class NoSuchField(SmError):
    code = "NoSuchField"


class NotEnclave(SmError):
    code = "NotEnclave"


_BY_CODE = {cls.code: cls for cls in list(globals().values())
            if isinstance(cls, type) and issubclass(cls, SmError)}


def error_by_code(code: str) -> type[SmError]:
    """Look up an error class by its wire code (scenario expectations)."""
    try:
        return _BY_CODE[code]
    except KeyError:
        raise KeyError(f"unknown error code {code!r}") from None
