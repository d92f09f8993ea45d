"""Locks and linear constraints expressed as nonnegative integers.

An exclusive acquire is ``int64_set_add(1, -1)``: the base is 1 and at most
one subtraction fits, so at most one acquirer per block. A shared acquire is
``int64_set_add(0, 0)``; it coexists with other shared acquires but its base
disagrees with any exclusive one. Each acquire states its own base, so a lock
needs no release: it is held for the rest of the block and free in the next.

A linear constraint ``sum(a_i * x_i) >= c`` is kept as a slack integer equal
to ``sum(a_i * x_i) - c``. Changing ``x_j`` from its snapshot value to
``x'_j`` emits ``int64_set_add(slack, a_j * (x'_j - x_j))`` with the slack
recomputed from the snapshot as the base, so concurrent updates that would
jointly break the constraint cannot all commit.

Methods:

* ``0 EXCLUSIVE`` name (32)
* ``1 SHARED``    name (32)
* ``2 LINEAR_UPDATE`` ``constraint (32) | c (i64) | j (u8) | new (i64) | n (u8)``
  followed by ``n`` pairs ``var key (32) | coeff (i64)``
"""

from __future__ import annotations

import struct
from typing import Sequence

from snapledger.contracts.host import Contract, HostContext, derive_key
from snapledger.errors import ProgramAbort

EXCLUSIVE = 0
SHARED = 1
LINEAR_UPDATE = 2

_LIN_HEAD = struct.Struct(">32sqBqB")
_LIN_TERM = struct.Struct(">32sq")


def lock_key(name: bytes) -> bytes:
    return derive_key(b"lock", name)


def semaphore_acquire(ctx: HostContext, key: bytes) -> None:
    ctx.int64_set_add(key, 1, -1)


def shared_acquire(ctx: HostContext, key: bytes) -> None:
    ctx.int64_set_add(key, 0, 0)


def linear_constraint_update(
    ctx: HostContext,
    constraint_key: bytes,
    values: Sequence[int],
    coeffs: Sequence[int],
    c: int,
    j: int,
    new_value: int,
) -> None:
    """Emit the slack adjustment for moving ``values[j]`` to ``new_value``."""
    if len(values) != len(coeffs) or not 0 <= j < len(values):
        raise ProgramAbort("bad linear constraint arguments")
    slack = sum(a * x for a, x in zip(coeffs, values)) - c
    ctx.int64_set_add(constraint_key, slack, coeffs[j] * (new_value - values[j]))


def linear_update_input(
    constraint: bytes, c: int, j: int, new_value: int, terms: Sequence[tuple[bytes, int]]
) -> bytes:
    return _LIN_HEAD.pack(constraint, c, j, new_value, len(terms)) + b"".join(
        _LIN_TERM.pack(k, a) for k, a in terms
    )


class Locks(Contract):
    METHODS = {EXCLUSIVE: "exclusive", SHARED: "shared", LINEAR_UPDATE: "linear_update"}

    def exclusive(self, ctx: HostContext, data: bytes) -> None:
        if len(data) != 32:
            raise ProgramAbort("malformed input")
        semaphore_acquire(ctx, lock_key(data))

    def shared(self, ctx: HostContext, data: bytes) -> None:
        if len(data) != 32:
            raise ProgramAbort("malformed input")
        shared_acquire(ctx, lock_key(data))

    def linear_update(self, ctx: HostContext, data: bytes) -> None:
        """Set variable ``j`` to ``new`` while keeping the constraint true.

        Variables live in this contract's storage as 8-byte strings. The
        updated variable is locked exclusively, so at most one update per
        variable lands in a block and the stored slack stays exact; updates
        of different variables commute and are checked through the slack.
        """
        if len(data) < _LIN_HEAD.size:
            raise ProgramAbort("malformed input")
        constraint, c, j, new_value, n = _LIN_HEAD.unpack_from(data, 0)
        if len(data) != _LIN_HEAD.size + n * _LIN_TERM.size:
            raise ProgramAbort("malformed input")
        terms = [
            _LIN_TERM.unpack_from(data, _LIN_HEAD.size + i * _LIN_TERM.size) for i in range(n)
        ]
        values = [_read_var(ctx, k) for k, _ in terms]
        coeffs = [a for _, a in terms]
        linear_constraint_update(ctx, constraint, values, coeffs, c, j, new_value)
        semaphore_acquire(ctx, lock_key(terms[j][0]))
        ctx.string_set(terms[j][0], struct.pack(">q", new_value))


def _read_var(ctx: HostContext, key: bytes) -> int:
    raw = ctx.string_get(key)
    if not raw:
        return 0
    if len(raw) != 8:
        raise ProgramAbort("variable is not an 8-byte integer")
    return struct.unpack(">q", raw)[0]
