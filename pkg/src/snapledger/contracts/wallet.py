"""Signature-checking wallet with replay prevention.

Method ``0 PAY``, input ``to (32) | amount (u64) | nonce (u64)``: the sender's
registered Ed25519 key must have signed the transaction's signing payload.
The transaction hash goes into the sender's replay set tagged with the
transaction's expiration block, expired entries are cleared, and the payment
is made with the token's ``TRANSFER_FROM`` using the allowance the account
granted to this wallet.

Reads: the sender's public key and the configured token address. Writes: one
set insert and one set clear on the replay set, plus the token's three
integer adjustments.
"""

from __future__ import annotations

import struct

from nacl.bindings import crypto_sign, crypto_sign_seed_keypair

from snapledger.block import TransactionRecord
from snapledger.contracts.host import Contract, HostContext, derive_key
from snapledger.contracts.token import TRANSFER_FROM, transfer_from_input
from snapledger.errors import ProgramAbort
from snapledger.store import Bytestring, OrderedSet, Value, make_address

PAY = 0

TOKEN_KEY = derive_key(b"wallet/token")

_PAY = struct.Struct(">32sQQ")


def pk_key(account: bytes) -> bytes:
    return derive_key(b"pk", account)


def replay_key(account: bytes) -> bytes:
    return derive_key(b"replay", account)


def replay_record(ctx: HostContext, set_key: bytes, expiration: int) -> None:
    """Make the running transaction conflict with any other execution of itself."""
    now = ctx.get_block_number()
    if expiration < now:
        raise ProgramAbort("transaction expired")
    ctx.set_insert(set_key, expiration, ctx.tx_hash)
    ctx.set_clear(set_key, now)


def pay_input(to: bytes, amount: int, nonce: int) -> bytes:
    return _PAY.pack(to, amount, nonce)


class Keypair:
    """Ed25519 key material derived from a 32-byte seed."""

    __slots__ = ("public", "_secret")

    def __init__(self, seed: bytes):
        self.public, self._secret = crypto_sign_seed_keypair(seed)

    def sign(self, message: bytes) -> bytes:
        return crypto_sign(message, self._secret)[:64]


class Wallet(Contract):
    METHODS = {PAY: "pay"}

    def pay(self, ctx: HostContext, data: bytes) -> None:
        if len(data) != _PAY.size:
            raise ProgramAbort("malformed input")
        to, amount, _nonce = _PAY.unpack(data)
        tx = ctx.tx
        account = tx.sender
        pk = ctx.string_get(pk_key(account))
        if not pk:
            raise ProgramAbort("no key registered for sender")
        if not ctx.verify_signature(pk, tx.signing_payload, tx.signature):
            raise ProgramAbort("bad signature")
        replay_record(ctx, replay_key(account), tx.expiration)
        token = ctx.string_get(TOKEN_KEY)
        if len(token) != 32:
            raise ProgramAbort("wallet has no token configured")
        ctx.call(token, TRANSFER_FROM, transfer_from_input(account, to, amount))

    # -- client side --------------------------------------------------------

    def payment(
        self,
        keys: Keypair,
        account: bytes,
        to: bytes,
        amount: int,
        nonce: int,
        expiration: int,
    ) -> TransactionRecord:
        unsigned = TransactionRecord(
            self.address, PAY, pay_input(to, amount, nonce), account, expiration
        )
        return unsigned.signed(keys.sign(unsigned.signing_payload))

    # -- genesis helpers ------------------------------------------------------

    def genesis(
        self,
        token: bytes,
        public_keys: dict[bytes, bytes],
        replay_limit: int | None = None,
    ) -> dict[bytes, Value]:
        out: dict[bytes, Value] = {make_address(self.address, TOKEN_KEY): Bytestring(token)}
        for acct, pk in public_keys.items():
            out[make_address(self.address, pk_key(acct))] = Bytestring(pk)
            if replay_limit is not None:
                out[make_address(self.address, replay_key(acct))] = OrderedSet((), replay_limit)
        return out

    def replay_address(self, account: bytes) -> bytes:
        return make_address(self.address, replay_key(account))
