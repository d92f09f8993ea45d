"""Host API for transaction programs.

A program sees the block's snapshot and nothing else: every read goes to the
snapshot, every write is appended, as a typed delta, to the transaction's
private buffer. Keys passed to the API are 32-byte local keys inside the
running contract's own namespace.
"""

from __future__ import annotations

from hashlib import sha256
from typing import TYPE_CHECKING, Mapping, Optional

from nacl.bindings import crypto_sign_open
from nacl.exceptions import BadSignatureError

from snapledger.errors import IndexOutOfRange, NoSuchElement, ProgramAbort, TypeMismatch
from snapledger.store import (
    DELETE,
    DEFAULT_SET_LIMIT,
    KEY_LEN,
    Int64SetAdd,
    Kind,
    OrderedSet,
    SetClear,
    SetElement,
    SetInsert,
    SetLimitIncrease,
    StringSet,
    Value,
    set_get_index,
    set_lookup,
)

if TYPE_CHECKING:
    from snapledger.block import TransactionRecord

MAX_CALL_DEPTH = 64

_EMPTY_SET = OrderedSet((), DEFAULT_SET_LIMIT)


def derive_key(label: bytes, *parts: bytes) -> bytes:
    """Local key for a labelled record, e.g. ``derive_key(b"balance", account)``."""
    return sha256(label + b"".join(parts)).digest()


def hash_bytes(data: bytes) -> bytes:
    return sha256(data).digest()


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """Ed25519 verification."""
    if len(public_key) != 32 or len(signature) != 64:
        return False
    try:
        crypto_sign_open(signature + message, public_key)
    except (BadSignatureError, ValueError):
        return False
    return True


class Contract:
    """Base class for registered programs.

    Subclasses map single-byte method ids to handler names in ``METHODS``.
    A handler takes ``(ctx, data)`` and may return bytes for cross-contract
    callers.
    """

    METHODS: Mapping[int, str] = {}

    def __init__(self, address: bytes):
        if len(address) != 32:
            raise ValueError("contract address must be 32 bytes")
        self.address = address

    def invoke(self, ctx: "HostContext", method: int, data: bytes) -> Optional[bytes]:
        name = self.METHODS.get(method)
        if name is None:
            raise ProgramAbort(f"{type(self).__name__} has no method {method}")
        return getattr(self, name)(ctx, data)


class Registry(dict):
    """Contract address -> program."""

    def register(self, contract: Contract) -> Contract:
        if contract.address in self:
            raise ValueError("contract address already registered")
        self[contract.address] = contract
        return contract


class HostContext:
    __slots__ = ("registry", "values", "block_number", "tx", "self_address", "caller",
                 "deltas", "depth")

    def __init__(
        self,
        registry: Mapping[bytes, Contract],
        values: Mapping[bytes, Value],
        block_number: int,
        tx: "TransactionRecord",
        self_address: bytes,
        caller: bytes,
        deltas: list,
        depth: int = 0,
    ):
        self.registry = registry
        self.values = values
        self.block_number = block_number
        self.tx = tx
        self.self_address = self_address
        self.caller = caller
        self.deltas = deltas
        self.depth = depth

    # -- environment --------------------------------------------------------

    def get_block_number(self) -> int:
        return self.block_number

    def get_caller_address(self) -> bytes:
        return self.caller

    def get_self_address(self) -> bytes:
        return self.self_address

    @property
    def tx_hash(self) -> bytes:
        return self.tx.tx_hash

    hash = staticmethod(hash_bytes)
    verify_signature = staticmethod(verify_signature)

    @staticmethod
    def abort(reason: str = "aborted") -> None:
        raise ProgramAbort(reason)

    def call(self, contract: bytes, method: int, data: bytes = b"") -> Optional[bytes]:
        """Synchronous call; the callee shares this transaction's delta buffer."""
        program = self.registry.get(contract)
        if program is None:
            raise ProgramAbort(f"no contract at {contract.hex()}")
        if self.depth + 1 >= MAX_CALL_DEPTH:
            raise ProgramAbort("call depth exceeded")
        sub = HostContext(
            self.registry, self.values, self.block_number, self.tx, contract,
            self.self_address, self.deltas, self.depth + 1,
        )
        return program.invoke(sub, method, data)

    # -- storage: reads -----------------------------------------------------

    def _addr(self, key: bytes) -> bytes:
        if len(key) != KEY_LEN:
            raise ProgramAbort("local keys are 32 bytes")
        return self.self_address + key

    def _read(self, key: bytes, kind: Kind) -> Optional[Value]:
        v = self.values.get(self._addr(key))
        if v is not None and v.kind != kind:
            raise TypeMismatch(f"{kind.name} read of a {v.kind.name} value")
        return v

    def string_get(self, key: bytes) -> bytes:
        v = self._read(key, Kind.BYTESTRING)
        return b"" if v is None else v.payload

    def int64_get(self, key: bytes) -> int:
        v = self._read(key, Kind.NONNEG_INT64)
        return 0 if v is None else v.value

    def set_get(self, key: bytes) -> OrderedSet:
        v = self._read(key, Kind.ORDERED_SET)
        return _EMPTY_SET if v is None else v

    def set_size(self, key: bytes) -> int:
        return len(self.set_get(key).elements)

    def set_limit(self, key: bytes) -> int:
        return self.set_get(key).limit

    def set_get_index(self, key: bytes, index: int) -> SetElement:
        try:
            return set_get_index(self.set_get(key), index)
        except IndexOutOfRange as e:
            raise ProgramAbort(str(e)) from e

    def set_lookup(self, key: bytes, threshold: int) -> SetElement:
        try:
            return set_lookup(self.set_get(key), threshold)
        except NoSuchElement as e:
            raise ProgramAbort(str(e)) from e

    def exists(self, key: bytes) -> bool:
        return self._addr(key) in self.values

    # -- storage: writes ----------------------------------------------------

    def string_set(self, key: bytes, payload: bytes) -> None:
        self.deltas.append((self._addr(key), StringSet(bytes(payload))))

    def int64_set_add(self, key: bytes, base: int, delta: int) -> None:
        try:
            d = Int64SetAdd(base, delta)
        except ValueError as e:
            raise ProgramAbort(str(e)) from e
        self.deltas.append((self._addr(key), d))

    def int64_add(self, key: bytes, delta: int) -> None:
        self.int64_set_add(key, self.int64_get(key), delta)

    def set_insert(self, key: bytes, tag: int, h: bytes) -> None:
        try:
            d = SetInsert(tag, h)
        except ValueError as e:
            raise ProgramAbort(str(e)) from e
        self.deltas.append((self._addr(key), d))

    def set_clear(self, key: bytes, threshold: int) -> None:
        try:
            d = SetClear(threshold)
        except ValueError as e:
            raise ProgramAbort(str(e)) from e
        self.deltas.append((self._addr(key), d))

    def set_limit_increase(self, key: bytes, amount: int) -> None:
        try:
            d = SetLimitIncrease(amount)
        except ValueError as e:
            raise ProgramAbort(str(e)) from e
        self.deltas.append((self._addr(key), d))

    def delete(self, key: bytes) -> None:
        self.deltas.append((self._addr(key), DELETE))


def root_context(
    registry: Mapping[bytes, Contract],
    values: Mapping[bytes, Value],
    block_number: int,
    tx: "TransactionRecord",
) -> HostContext:
    """Context for the top-level call of ``tx``; the caller is the sender."""
    return HostContext(registry, values, block_number, tx, tx.contract, tx.sender, [])

