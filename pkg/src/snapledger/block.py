"""Transactions, blocks and their canonical encodings.

Transaction encoding::

    contract (32) | method (u8) | expiration (u64) | sender (32) |
    u32 input length | input | signature (64)

The signature covers everything before it. ``tx_hash`` is SHA-256 of the full
encoding.

Block encoding::

    u64 block number | u32 tx count | (u32 length | tx encoding)* |
    state root (32) | modification root (32) | tx root (32)

Transactions are emitted in ``tx_hash`` order, which makes the encoding of the
unordered multiset canonical. Missing roots encode as 32 zero bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from hashlib import sha256
from typing import Iterable, Optional

_TX_HEAD = struct.Struct(">32sBQ32sI")
_BLOCK_HEAD = struct.Struct(">QI")
_U32 = struct.Struct(">I")

SIG_LEN = 64
NO_ROOT = bytes(32)


@dataclass(frozen=True)
class TransactionRecord:
    contract: bytes
    method: int
    input: bytes = b""
    sender: bytes = bytes(32)
    expiration: int = 0
    signature: bytes = bytes(SIG_LEN)

    def __post_init__(self):
        if len(self.contract) != 32 or len(self.sender) != 32:
            raise ValueError("contract and sender must be 32 bytes")
        if len(self.signature) != SIG_LEN:
            raise ValueError("signature must be 64 bytes")
        if not 0 <= self.method < 256:
            raise ValueError("method id must fit in one byte")

    @cached_property
    def signing_payload(self) -> bytes:
        return (
            _TX_HEAD.pack(self.contract, self.method, self.expiration, self.sender, len(self.input))
            + self.input
        )

    @cached_property
    def encoded(self) -> bytes:
        return self.signing_payload + self.signature

    def encode(self) -> bytes:
        return self.encoded

    @cached_property
    def tx_hash(self) -> bytes:
        return sha256(self.encoded).digest()

    def signed(self, signature: bytes) -> "TransactionRecord":
        return replace(self, signature=signature)

    @classmethod
    def decode(cls, data: bytes) -> "TransactionRecord":
        if len(data) < _TX_HEAD.size:
            raise ValueError("bad transaction encoding")
        contract, method, expiration, sender, n = _TX_HEAD.unpack_from(data, 0)
        start = _TX_HEAD.size
        if len(data) != start + n + SIG_LEN:
            raise ValueError("bad transaction encoding")
        return cls(
            contract, method, bytes(data[start : start + n]), sender, expiration,
            bytes(data[start + n :]),
        )


@dataclass(frozen=True)
class Block:
    block_number: int
    transactions: tuple = ()
    state_root: Optional[bytes] = None
    modification_root: Optional[bytes] = None
    tx_root: Optional[bytes] = None
    _sorted: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        if not self._sorted:
            txs = tuple(sorted(self.transactions, key=_tx_key))
            object.__setattr__(self, "transactions", txs)
            object.__setattr__(self, "_sorted", True)

    @classmethod
    def of(cls, block_number: int, transactions: Iterable[TransactionRecord], **roots) -> "Block":
        return cls(block_number, tuple(transactions), **roots)

    def __len__(self) -> int:
        return len(self.transactions)

    def with_roots(self, state_root: bytes, modification_root: bytes, tx_root: bytes) -> "Block":
        return replace(
            self, state_root=state_root, modification_root=modification_root, tx_root=tx_root
        )

    def without_roots(self) -> "Block":
        return replace(self, state_root=None, modification_root=None, tx_root=None)

    def encode(self) -> bytes:
        parts = [_BLOCK_HEAD.pack(self.block_number, len(self.transactions))]
        for tx in self.transactions:
            enc = tx.encoded
            parts.append(_U32.pack(len(enc)))
            parts.append(enc)
        for r in (self.state_root, self.modification_root, self.tx_root):
            parts.append(NO_ROOT if r is None else r)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        try:
            return cls._decode(data)
        except struct.error as e:
            raise ValueError(f"bad block encoding: {e}") from e

    @classmethod
    def _decode(cls, data: bytes) -> "Block":
        number, count = _BLOCK_HEAD.unpack_from(data, 0)
        pos = _BLOCK_HEAD.size
        txs = []
        for _ in range(count):
            (n,) = _U32.unpack_from(data, pos)
            pos += 4
            txs.append(TransactionRecord.decode(data[pos : pos + n]))
            pos += n
        if len(data) != pos + 96:
            raise ValueError("bad block encoding")
        roots = [data[pos + 32 * i : pos + 32 * (i + 1)] for i in range(3)]
        roots = [None if r == NO_ROOT else bytes(r) for r in roots]
        return cls(number, tuple(txs), *roots)

    @cached_property
    def block_hash(self) -> bytes:
        return sha256(self.encode()).digest()


def _tx_key(tx: TransactionRecord) -> bytes:
    return tx.tx_hash
