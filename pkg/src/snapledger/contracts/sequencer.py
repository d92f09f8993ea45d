"""Fee-ordered action sequencer.

Actions submitted during block ``r`` accumulate in round ``r``'s ordered set,
tagged by the fee they escrow. In any later block one executor runs the
whole round: actions are dispatched highest fee first (equal fees by hash),
their escrowed fees go to the executor, and the round's storage is deleted.
Rounds must be executed in order; an exclusive semaphore keeps two executions
out of one block.

An action is ``target contract (32) | method (u8) | input``. It is dispatched
with the sequencer as caller; an action that aborts is skipped, its deltas
discarded, and its fee still paid.

Methods:

* ``0 SUBMIT`` fee (u64) | action
* ``1 EXEC``   round (u64)
"""

from __future__ import annotations

import struct

from snapledger.contracts.host import Contract, HostContext, derive_key
from snapledger.contracts.locks import semaphore_acquire
from snapledger.contracts.token import TRANSFER, TRANSFER_FROM, transfer_from_input, transfer_input
from snapledger.errors import ProgramAbort
from snapledger.store import SetElement

SUBMIT = 0
EXEC = 1

TOKEN_KEY = derive_key(b"sequencer/token")
SEMAPHORE_KEY = derive_key(b"sequencer/semaphore")
NEXT_ROUND_KEY = derive_key(b"sequencer/next")

_U64 = struct.Struct(">Q")
FIRST_ROUND = 1


def round_key(r: int) -> bytes:
    return derive_key(b"round", _U64.pack(r))


def action_key(r: int, h: bytes) -> bytes:
    return derive_key(b"action", _U64.pack(r), h)


def order_key(r: int) -> bytes:
    return derive_key(b"order", _U64.pack(r))


def submit_input(fee: int, action: bytes) -> bytes:
    return _U64.pack(fee) + action


def exec_input(r: int) -> bytes:
    return _U64.pack(r)


def make_action(target: bytes, method: int, data: bytes = b"") -> bytes:
    return target + bytes((method,)) + data


def dispatch_order(elements) -> list[SetElement]:
    """Highest fee first; ties by ascending hash."""
    return sorted(elements, key=lambda e: (-e.tag, e.hash))


class Sequencer(Contract):
    METHODS = {SUBMIT: "submit", EXEC: "exec_round"}

    def _token(self, ctx: HostContext) -> bytes:
        token = ctx.string_get(TOKEN_KEY)
        if len(token) != 32:
            raise ProgramAbort("sequencer has no token configured")
        return token

    def submit(self, ctx: HostContext, data: bytes) -> None:
        if len(data) < 8 + 33:
            raise ProgramAbort("malformed input")
        (fee,) = _U64.unpack_from(data, 0)
        action = data[8:]
        r = ctx.get_block_number()
        h = ctx.hash(action)
        ctx.set_insert(round_key(r), fee, h)
        ctx.string_set(action_key(r, h), action)
        if fee:
            ctx.call(self._token(ctx), TRANSFER_FROM,
                     transfer_from_input(ctx.caller, self.address, fee))

    def exec_round(self, ctx: HostContext, data: bytes) -> None:
        if len(data) != 8:
            raise ProgramAbort("malformed input")
        (r,) = _U64.unpack(data)
        semaphore_acquire(ctx, SEMAPHORE_KEY)
        stored = ctx.int64_get(NEXT_ROUND_KEY)
        expected = stored if stored else FIRST_ROUND
        if r != expected:
            raise ProgramAbort(f"round {r} is not next (expected {expected})")
        if r >= ctx.get_block_number():
            raise ProgramAbort("round has not finished")
        ctx.int64_set_add(NEXT_ROUND_KEY, stored, r + 1 - stored)
        total = 0
        order = []
        for e in dispatch_order(ctx.set_get(round_key(r)).elements):
            action = ctx.string_get(action_key(r, e.hash))
            mark = len(ctx.deltas)
            try:
                ctx.call(action[:32], action[32], action[33:])
            except Exception:
                del ctx.deltas[mark:]
            ctx.delete(action_key(r, e.hash))
            order.append(e.hash)
            total += e.tag
        ctx.string_set(order_key(r), b"".join(order))
        ctx.delete(round_key(r))
        if total:
            ctx.call(self._token(ctx), TRANSFER, transfer_input(ctx.caller, total))
