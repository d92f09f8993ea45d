"""A contract whose behaviour is supplied in the transaction input.

Method ``0 RUN`` takes a JSON list of host calls and performs them in order.
It exists for tests, demos and the HTTP service, where it is convenient to
emit arbitrary delta patterns without writing a new program. Keys are either
64 hex characters or a label that is hashed into a key.

Supported operations::

    ["string_set", key, hex payload]        ["int64_add", key, delta]
    ["int64_set_add", key, base, delta]     ["set_insert", key, tag, hex hash]
    ["set_clear", key, threshold]           ["set_limit_increase", key, amount]
    ["delete", key]                         ["abort"]
    ["call", hex contract, method, hex input]
    ["require_int", key, value]             (aborts unless the snapshot matches)
"""

from __future__ import annotations

import json

from snapledger.contracts.host import Contract, HostContext, derive_key
from snapledger.errors import ProgramAbort

RUN = 0


def script_key(key: str) -> bytes:
    if len(key) == 64:
        try:
            return bytes.fromhex(key)
        except ValueError:
            pass
    return derive_key(b"script", key.encode())


def script_input(ops: list) -> bytes:
    return json.dumps(ops, separators=(",", ":")).encode()


class Script(Contract):
    METHODS = {RUN: "run"}

    def run(self, ctx: HostContext, data: bytes) -> None:
        try:
            ops = json.loads(data)
        except ValueError as e:
            raise ProgramAbort(f"bad script: {e}") from e
        if not isinstance(ops, list):
            raise ProgramAbort("script must be a list of operations")
        for op in ops:
            self._step(ctx, op)

    @staticmethod
    def _step(ctx: HostContext, op) -> None:
        if not isinstance(op, list) or not op:
            raise ProgramAbort(f"bad operation {op!r}")
        name, args = op[0], op[1:]
        if name == "abort":
            raise ProgramAbort("script abort")
        if name == "call":
            contract, method, data = args
            ctx.call(bytes.fromhex(contract), int(method), bytes.fromhex(data))
            return
        key = script_key(args[0])
        if name == "string_set":
            ctx.string_set(key, bytes.fromhex(args[1]))
        elif name == "int64_add":
            ctx.int64_add(key, int(args[1]))
        elif name == "int64_set_add":
            ctx.int64_set_add(key, int(args[1]), int(args[2]))
        elif name == "set_insert":
            ctx.set_insert(key, int(args[1]), bytes.fromhex(args[2]))
        elif name == "set_clear":
            ctx.set_clear(key, int(args[1]))
        elif name == "set_limit_increase":
            ctx.set_limit_increase(key, int(args[1]))
        elif name == "delete":
            ctx.delete(key)
        elif name == "require_int":
            if ctx.int64_get(key) != int(args[1]):
                raise ProgramAbort("snapshot value differs")
        else:
            raise ProgramAbort(f"unknown operation {name!r}")
