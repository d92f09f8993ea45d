"""Exception hierarchy shared across the ledger."""

from __future__ import annotations


class LedgerError(Exception):
    """Base class for everything raised by this package."""


class ConstraintViolation(LedgerError):
    """A set of deltas on one key cannot be resolved to a valid value."""

    def __init__(self, message: str = "", address: bytes | None = None):
        super().__init__(message)
        self.address = address


class TypeConflict(ConstraintViolation):
    pass


class BaseMismatch(ConstraintViolation):
    pass


class NonnegativityViolation(ConstraintViolation):
    pass


class DuplicateHash(ConstraintViolation):
    pass


class SizeViolation(ConstraintViolation):
    pass


class Overflow(ConstraintViolation):
    pass


# Reservation-time flavours of the resolution errors above.
class ParameterMismatch(BaseMismatch):
    pass


class SetFull(SizeViolation):
    pass


class IndexOutOfRange(LedgerError, IndexError):
    pass


class NoSuchElement(LedgerError, LookupError):
    pass


class ProgramAbort(LedgerError):
    """A transaction program aborted or trapped; it emits no deltas."""


class TypeMismatch(ProgramAbort):
    """A host read used an accessor that does not match the stored kind."""


class BlockInvalid(LedgerError):
    def __init__(self, reason: str, address: bytes | None = None):
        super().__init__(reason if address is None else f"{reason} at {address.hex()}")
        self.reason = reason
        self.address = address


class LogCorruption(LedgerError):
    def __init__(self, path: str, position: int, reason: str):
        super().__init__(f"{path}: {reason} at byte {position}")
        self.path = path
        self.position = position
        self.reason = reason
