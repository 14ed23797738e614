"""Exception hierarchy shared across the package."""

from __future__ import annotations


class BlockIoTError(Exception):
    """Base class for every error raised by blockiot."""


# core-model
class EmptyName(BlockIoTError, ValueError):
    pass


class InvalidDate(BlockIoTError, ValueError):
    pass


class NoTemplateMatch(BlockIoTError, LookupError):
    pass


class AmbiguousTemplate(BlockIoTError, LookupError):
    pass


class AllKeysUnrecognized(BlockIoTError, ValueError):
    pass


class TemplateParseError(BlockIoTError, ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class DuplicateIdentifyingKeys(BlockIoTError, ValueError):
    pass


class InvalidReading(BlockIoTError, ValueError):
    pass


class PeerIdCollision(BlockIoTError):
    pass


class UnknownPatient(BlockIoTError, LookupError):
    pass


# content-store
class StorageFull(BlockIoTError):
    pass


class IoFailure(BlockIoTError, OSError):
    pass


class NotFound(BlockIoTError, LookupError):
    pass


class CorruptBlock(BlockIoTError):
    pass


class UnknownCid(BlockIoTError, LookupError):
    pass


class NameNotFound(BlockIoTError, LookupError):
    pass


class NoRecipients(BlockIoTError, ValueError):
    pass


class WrongKey(BlockIoTError):
    pass


class DecryptFailure(BlockIoTError):
    pass


# ledger-contracts
class InvalidTransaction(BlockIoTError, ValueError):
    pass


class UnknownRequester(BlockIoTError, PermissionError):
    pass


class UnknownSubject(BlockIoTError, LookupError):
    pass


class GrantExpired(BlockIoTError, PermissionError):
    pass


class GrantUnknown(BlockIoTError, PermissionError):
    pass


class InvalidSchedule(BlockIoTError, ValueError):
    pass


class UnknownAlert(BlockIoTError, LookupError):
    pass


class WrongStage(BlockIoTError):
    pass


class DuplicateAnalyzer(BlockIoTError):
    pass


class UnknownSink(BlockIoTError, LookupError):
    pass


class EndpointUnreachable(BlockIoTError, ConnectionError):
    pass
