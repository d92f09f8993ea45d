"""Fungible token with additive allowances.

Methods (single-byte ids):

* ``0 TRANSFER``        to (32) | amount (u64), moves the caller's own balance
* ``1 TRANSFER_FROM``   from (32) | to (32) | amount (u64), spends an allowance
  granted by ``from`` to the caller
* ``2 ALLOWANCE_DELTA`` spender (32) | delta (i64), adjusts what ``spender``
  may move out of the caller's balance
* ``3 MINT``            to (32) | amount (u64), minter only, draws on the
  unminted supply

Balances and allowances are nonnegative integers, so overdrafts are not
checked here: they surface as reservation failures. Only contracts may move
their own balance or grant allowances (the top-level sender of a transaction
is not authenticated by the host; the wallet contract does that), and the
spender of an allowance is always the calling contract, so every method
refuses top-level invocation.
"""

from __future__ import annotations

import struct

from snapledger.contracts.host import Contract, HostContext, derive_key
from snapledger.errors import ProgramAbort
from snapledger.store import Bytestring, NonnegInt64, Value, make_address

TRANSFER = 0
TRANSFER_FROM = 1
ALLOWANCE_DELTA = 2
MINT = 3

MINTER_KEY = derive_key(b"token/minter")
UNMINTED_KEY = derive_key(b"token/unminted")

_TO_AMOUNT = struct.Struct(">32sQ")
_FROM_TO_AMOUNT = struct.Struct(">32s32sQ")
_SPENDER_DELTA = struct.Struct(">32sq")


def balance_key(account: bytes) -> bytes:
    return derive_key(b"balance", account)


def allowance_key(owner: bytes, spender: bytes) -> bytes:
    return derive_key(b"allowance", owner, spender)


def transfer_input(to: bytes, amount: int) -> bytes:
    return _TO_AMOUNT.pack(to, amount)


def transfer_from_input(src: bytes, to: bytes, amount: int) -> bytes:
    return _FROM_TO_AMOUNT.pack(src, to, amount)


def allowance_delta_input(spender: bytes, delta: int) -> bytes:
    return _SPENDER_DELTA.pack(spender, delta)


def mint_input(to: bytes, amount: int) -> bytes:
    return _TO_AMOUNT.pack(to, amount)


def _unpack(s: struct.Struct, data: bytes) -> tuple:
    if len(data) != s.size:
        raise ProgramAbort("malformed input")
    return s.unpack(data)


class Token(Contract):
    METHODS = {
        TRANSFER: "transfer",
        TRANSFER_FROM: "transfer_from",
        ALLOWANCE_DELTA: "allowance_delta",
        MINT: "mint",
    }

    def transfer(self, ctx: HostContext, data: bytes) -> None:
        to, amount = _unpack(_TO_AMOUNT, data)
        if ctx.depth == 0:
            raise ProgramAbort("direct transfers need an authenticated contract caller")
        self._move(ctx, ctx.caller, to, amount)

    def transfer_from(self, ctx: HostContext, data: bytes) -> None:
        src, to, amount = _unpack(_FROM_TO_AMOUNT, data)
        if ctx.depth == 0:
            # otherwise a sender could claim to be a spender contract
            raise ProgramAbort("allowances are spent by contracts")
        ctx.int64_add(allowance_key(src, ctx.caller), -amount)
        self._move(ctx, src, to, amount)

    def allowance_delta(self, ctx: HostContext, data: bytes) -> None:
        spender, delta = _unpack(_SPENDER_DELTA, data)
        if ctx.depth == 0:
            raise ProgramAbort("allowances are granted by contracts")
        ctx.int64_add(allowance_key(ctx.caller, spender), delta)

    def mint(self, ctx: HostContext, data: bytes) -> None:
        to, amount = _unpack(_TO_AMOUNT, data)
        if ctx.depth == 0:
            raise ProgramAbort("minting needs an authenticated contract caller")
        minter = ctx.string_get(MINTER_KEY)
        if not minter or ctx.caller != minter:
            raise ProgramAbort("caller is not the minter")
        ctx.int64_add(UNMINTED_KEY, -amount)
        ctx.int64_add(balance_key(to), amount)

    @staticmethod
    def _move(ctx: HostContext, src: bytes, to: bytes, amount: int) -> None:
        # amounts arrive as u64; anything past the signed range is not a valid amount
        if amount > (1 << 63) - 1:
            raise ProgramAbort("negative transfer amount")
        ctx.int64_add(balance_key(src), -amount)
        ctx.int64_add(balance_key(to), amount)

    # -- genesis helpers ------------------------------------------------------

    def balance_address(self, account: bytes) -> bytes:
        return make_address(self.address, balance_key(account))

    def allowance_address(self, owner: bytes, spender: bytes) -> bytes:
        return make_address(self.address, allowance_key(owner, spender))

    def genesis(
        self,
        balances: dict[bytes, int] | None = None,
        allowances: dict[tuple[bytes, bytes], int] | None = None,
        unminted: int = 0,
        minter: bytes | None = None,
    ) -> dict[bytes, Value]:
        out: dict[bytes, Value] = {}
        for acct, bal in (balances or {}).items():
            out[self.balance_address(acct)] = NonnegInt64(bal)
        for (owner, spender), amt in (allowances or {}).items():
            out[self.allowance_address(owner, spender)] = NonnegInt64(amt)
        if unminted:
            out[make_address(self.address, UNMINTED_KEY)] = NonnegInt64(unminted)
        if minter is not None:
            out[make_address(self.address, MINTER_KEY)] = Bytestring(minter)
        return out

    def balance_of(self, values, account: bytes) -> int:
        v = values.get(self.balance_address(account))
        return 0 if v is None else v.value

    def allowance_of(self, values, owner: bytes, spender: bytes) -> int:
        v = values.get(self.allowance_address(owner, spender))
        return 0 if v is None else v.value

    def unminted_of(self, values) -> int:
        v = values.get(make_address(self.address, UNMINTED_KEY))
        return 0 if v is None else v.value
