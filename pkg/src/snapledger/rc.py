"""Reserve / rollback / commit for in-block deltas.

A block proposer runs each candidate transaction, then *reserves* all of its
deltas. If every reservation succeeds the transaction's deltas are committed;
otherwise the reservations made so far are rolled back and the transaction is
dropped. Reservations are tracked per key in a :class:`ReservationState` and
are arranged so that, whatever the interleaving of concurrent reserves,
rollbacks and commits, the committed deltas always resolve without error.

All shared mutation goes through single-word read-modify-write steps (see
:mod:`snapledger.atomics`); nothing here holds more than one word's stripe.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import threading
from bisect import bisect_left
from dataclasses import dataclass
from typing import Iterator, Mapping, Optional

from snapledger.atomics import AtomicArray, AtomicWord, stripe_for
from snapledger.errors import (
    DuplicateHash,
    NonnegativityViolation,
    Overflow,
    ParameterMismatch,
    SetFull,
    SizeViolation,
    TypeConflict,
)
from snapledger.trie import ModificationLog
from snapledger.store import (
    DEFAULT_SET_LIMIT,
    INT64_MAX,
    MAX_SET_LIMIT,
    Bytestring,
    Delta,
    Int64SetAdd,
    Kind,
    NonnegInt64,
    OrderedSet,
    SetClear,
    SetElement,
    SetInsert,
    SetLimitIncrease,
    StringSet,
    Value,
)


class Mode(enum.Enum):
    PROPOSE = "propose"
    EXECUTE = "execute"


class _Unchanged:
    def __repr__(self) -> str:
        return "UNCHANGED"


UNCHANGED = _Unchanged()


@dataclass(frozen=True, eq=False, slots=True)
class ParameterRecord:
    """Immutable must-agree data for one key, replaced wholesale on change."""

    kind: Kind
    payload: object
    expect_count: int
    committed_count: int = 0


class HashArena:
    """Per-thread bump buffers of set elements addressed by 32-bit handles.

    A handle is ``buffer_id << 20 | offset``. Buffers are only appended to
    during a block and dropped wholesale by :meth:`reset`.
    """

    OFFSET_BITS = 20
    OFFSET_MASK = (1 << OFFSET_BITS) - 1
    MAX_BUFFERS = 1 << (32 - OFFSET_BITS)

    def __init__(self):
        self._buffers: dict[int, list] = {}
        self._ids = itertools.count()
        self._local = threading.local()

    def _fresh_buffer(self) -> tuple[int, list]:
        bid = next(self._ids)
        if bid >= self.MAX_BUFFERS:
            raise SetFull("hash arena exhausted")
        buf: list = []
        self._buffers[bid] = buf
        self._local.current = (bid, buf)
        return bid, buf

    def alloc(self, element: SetElement) -> int:
        cur = getattr(self._local, "current", None)
        bid, buf = cur if cur is not None else self._fresh_buffer()
        off = len(buf)
        if off > self.OFFSET_MASK:
            bid, buf = self._fresh_buffer()
            off = 0
        buf.append(element)
        return (bid << self.OFFSET_BITS) | off

    def get(self, handle: int) -> SetElement:
        return self._buffers[handle >> self.OFFSET_BITS][handle & self.OFFSET_MASK]

    def allocated(self) -> int:
        return sum(len(b) for b in list(self._buffers.values()))

    def reset(self) -> None:
        self._buffers = {}
        self._ids = itertools.count()
        self._local = threading.local()


_DUPLICATE = -1
_FULL = -2


class _SlotTable:
    """Open-addressed table of element handles, allocated in 64-slot pages.

    A slot word is 0 (never used) or ``(handle + 1) << 1 | live``. Once a slot
    holds some hash it keeps that hash until the block ends: rollback clears
    only the live bit, and a later insert of the *same* hash revives it. That
    keeps every hash bound to at most one slot without any multi-word step.

    Every page, once installed, is also pushed onto a lock-free stack so the
    end-of-block scan visits only the pages that exist.
    """

    __slots__ = ("mask", "_top", "_pages")

    def __init__(self, capacity: int):
        self.mask = capacity - 1
        self._top = AtomicArray(max(1, capacity >> 12), None)
        self._pages = AtomicWord(None)  # (page, next) cells

    def _page(self, i: int, create: bool) -> Optional[AtomicArray]:
        top = self._top
        mid = top.load(i >> 12)
        if mid is None:
            if not create:
                return None
            top.compare_and_swap(i >> 12, None, AtomicArray(64, None))
            mid = top.load(i >> 12)
        j = (i >> 6) & 63
        page = mid.load(j)
        if page is None:
            if not create:
                return None
            fresh = AtomicArray(64, 0)
            if mid.compare_and_swap(j, None, fresh):
                self._push_page(fresh)
            page = mid.load(j)
        return page

    def _push_page(self, page: AtomicArray) -> None:
        while True:
            head = self._pages.load()
            if self._pages.compare_and_swap(head, (page, head)):
                return

    def claim(self, arena: HashArena, element: SetElement) -> tuple[int, int]:
        h = element.hash
        live = ((arena.alloc(element) + 1) << 1) | 1
        mask = self.mask
        i = int.from_bytes(h[:4], "big") & mask
        for _ in range(mask + 1):
            page = self._page(i, True)
            s = i & 63
            w = page.load(s)
            if w == 0:
                if page.compare_and_swap(s, 0, live):
                    return i, live
                w = page.load(s)
            if arena.get((w >> 1) - 1).hash == h:
                if w & 1:
                    return _DUPLICATE, 0
                # released slot of this very hash; a failed CAS means someone revived it
                if page.compare_and_swap(s, w, live):
                    return i, live
                return _DUPLICATE, 0
            i = (i + 1) & mask
        return _FULL, 0

    def release(self, i: int, word: int) -> None:
        ok = self._page(i, False).compare_and_swap(i & 63, word, word & ~1)
        assert ok, "slot released by someone other than its owner"

    def live_words(self) -> list[int]:
        out: list[int] = []
        cell = self._pages.load()
        while cell is not None:
            page, cell = cell
            out.extend([w for w in page.snapshot() if w & 1])
        return out


def _table_capacity(limit: int) -> int:
    cap = 128
    while cap < 2 * limit:
        cap <<= 1
    return cap


class Ticket:
    """Undo/commit record for one successful reservation."""

    __slots__ = ("state", "delta", "slot", "word", "done")

    def __init__(self, state: "ReservationState", delta: Delta, slot: int = -1, word: int = 0):
        self.state = state
        self.delta = delta
        self.slot = slot
        self.word = word
        self.done = False

    def __repr__(self) -> str:
        return f"Ticket({self.state.address.hex()[:16]}…, {self.delta!r})"


class ReservationState:
    """Lock-free accumulator for every delta reserved against one key."""

    __slots__ = (
        "address",
        "snapshot",
        "_owner",
        "_lock",
        "_params",
        "_add",
        "_sub",
        "_live",
        "_table",
        "_max_clear",
        "_limit_delta",
        "_deleted",
    )

    def __init__(self, address: bytes, snapshot: Optional[Value], owner: "ReservationMap"):
        self.address = address
        self.snapshot = snapshot
        self._owner = owner
        self._lock = stripe_for(self)
        self._params: Optional[ParameterRecord] = None
        self._add = 0
        self._sub = 0
        self._live = 0
        self._table: Optional[_SlotTable] = None
        self._max_clear = 0
        self._limit_delta = 0
        self._deleted = False

    # -- parameter agreement ------------------------------------------------

    def _swap_params(self, expected, new) -> bool:
        with self._lock:
            if self._params is expected:
                self._params = new
                ok = True
            else:
                ok = False
        if ok and expected is not None:
            self._owner.retired.append(expected)
        return ok

    def _acquire_params(self, kind: Kind, payload) -> None:
        while True:
            cur = self._params
            if cur is None:
                if self._swap_params(None, ParameterRecord(kind, payload, 1)):
                    return
                continue
            if cur.kind != kind:
                raise TypeConflict(f"{kind.name} write races a {cur.kind.name} write", self.address)
            if cur.payload != payload:
                raise ParameterMismatch("concurrent writes disagree on parameters", self.address)
            if self._swap_params(
                cur, ParameterRecord(kind, payload, cur.expect_count + 1, cur.committed_count)
            ):
                return

    def _release_params(self) -> None:
        while True:
            cur = self._params
            left = cur.expect_count - 1
            if left == 0 and cur.committed_count == 0:
                new = None
            else:
                new = ParameterRecord(cur.kind, cur.payload, left, cur.committed_count)
            if self._swap_params(cur, new):
                return

    def _commit_params(self) -> None:
        while True:
            cur = self._params
            new = ParameterRecord(
                cur.kind, cur.payload, cur.expect_count, cur.committed_count + 1
            )
            if self._swap_params(cur, new):
                return

    # -- protocol -----------------------------------------------------------

    def reserve(self, delta: Delta) -> Ticket:
        kind = delta.kind
        if kind is None:
            return Ticket(self, delta)
        snap = self.snapshot
        if snap is not None and snap.kind != kind:
            raise TypeConflict(f"{kind.name} write to a {snap.kind.name} value", self.address)
        cls = type(delta)
        if cls is Int64SetAdd:
            payload = delta.base
        elif cls is StringSet:
            payload = delta.payload
        else:
            payload = None
        self._acquire_params(kind, payload)
        try:
            if cls is Int64SetAdd:
                self._reserve_int(delta.base, delta.delta)
            elif cls is SetInsert:
                return self._reserve_insert(delta)
            elif cls is SetLimitIncrease:
                with self._lock:
                    self._limit_delta += delta.amount
        except BaseException:
            self._release_params()
            raise
        return Ticket(self, delta)

    def _reserve_int(self, x: int, d: int) -> None:
        if d > 0:
            with self._lock:
                if x + self._add + d > INT64_MAX:
                    raise Overflow("integer would exceed signed 64-bit range", self.address)
                self._add += d
        elif d < 0:
            if x < 0:
                raise NonnegativityViolation("subtraction from a negative base", self.address)
            with self._lock:
                if self._sub - d > x:
                    raise NonnegativityViolation(
                        f"subtractions of {self._sub - d} exceed base {x}", self.address
                    )
                self._sub -= d

    def _reserve_insert(self, delta: SetInsert) -> Ticket:
        snap = self.snapshot
        if snap is not None:
            if delta.hash in snap.hashes:
                raise DuplicateHash("hash already present in the set", self.address)
            n, limit = len(snap.elements), snap.limit
        else:
            n, limit = 0, DEFAULT_SET_LIMIT
        with self._lock:
            if n + self._live + 1 > limit:
                raise SetFull(f"set limit {limit} reached", self.address)
            self._live += 1
        table = self._table
        if table is None:
            fresh = _SlotTable(_table_capacity(limit))
            with self._lock:
                if self._table is None:
                    self._table = fresh
                table = self._table
        slot, word = table.claim(self._owner.arena, SetElement(delta.tag, delta.hash))
        if slot < 0:
            with self._lock:
                self._live -= 1
            if slot == _DUPLICATE:
                raise DuplicateHash("hash inserted twice in this block", self.address)
            raise SetFull("insert table exhausted", self.address)
        return Ticket(self, delta, slot, word)

    def rollback(self, ticket: Ticket) -> None:
        assert not ticket.done, "ticket settled twice"
        ticket.done = True
        delta = ticket.delta
        if delta.kind is None:
            return
        cls = type(delta)
        if cls is Int64SetAdd:
            d = delta.delta
            with self._lock:
                if d > 0:
                    self._add -= d
                elif d < 0:
                    self._sub += d
        elif cls is SetInsert:
            self._table.release(ticket.slot, ticket.word)
            with self._lock:
                self._live -= 1
        elif cls is SetLimitIncrease:
            with self._lock:
                self._limit_delta -= delta.amount
        self._release_params()

    def commit(self, ticket: Ticket) -> None:
        assert not ticket.done, "ticket settled twice"
        ticket.done = True
        delta = ticket.delta
        if delta.kind is None:
            # sticky flag: a plain single-word store, idempotent
            self._deleted = True
            return
        if type(delta) is SetClear:
            with self._lock:
                if delta.threshold > self._max_clear:
                    self._max_clear = delta.threshold
        self._commit_params()

    # -- end of block -------------------------------------------------------

    def finalize(self, mode: Mode = Mode.EXECUTE):
        """Merged value for this key, ``None`` for absent, or ``UNCHANGED``.

        Requires quiescence. In execution mode the constraints are re-checked
        and violations raised; in proposal mode they are asserted unreachable.
        """
        rec = self._params
        if rec is None:
            return None if self._deleted else UNCHANGED
        if rec.expect_count != rec.committed_count:
            raise RuntimeError("finalize with reservations still in flight")
        try:
            value = self._resolve(rec)
        except SizeViolation:
            if mode is Mode.PROPOSE:
                raise AssertionError("proposal produced an unresolvable key")
            raise
        except (Overflow, NonnegativityViolation):
            if mode is Mode.PROPOSE:
                raise AssertionError("proposal produced an unresolvable key")
            raise
        return None if self._deleted else value

    def _resolve(self, rec: ParameterRecord) -> Value:
        kind = rec.kind
        if kind == Kind.NONNEG_INT64:
            x = rec.payload
            if x + self._add > INT64_MAX:
                raise Overflow("integer exceeds signed 64-bit range", self.address)
            if (x >= 0 and self._sub > x) or (x < 0 and self._sub):
                raise NonnegativityViolation("committed subtractions exceed base", self.address)
            return NonnegInt64(x + self._add - self._sub)
        if kind == Kind.BYTESTRING:
            return Bytestring(rec.payload)
        base = self.snapshot if self.snapshot is not None else OrderedSet()
        arena = self._owner.arena
        added = (
            [arena.get((w >> 1) - 1) for w in self._table.live_words()]
            if self._table is not None
            else []
        )
        if len(base.elements) + len(added) > base.limit:
            raise SizeViolation("set over its limit", self.address)
        elements = sorted(base.elements + tuple(added)) if added else list(base.elements)
        if self._max_clear:
            elements = elements[bisect_left(elements, self._max_clear, key=_tag) :]
        limit = min(MAX_SET_LIMIT, base.limit + self._limit_delta)
        return OrderedSet(tuple(elements), limit)

    # -- introspection (tests, diagnostics) ----------------------------------

    @property
    def params(self) -> Optional[ParameterRecord]:
        return self._params

    @property
    def total_add(self) -> int:
        return self._add

    @property
    def total_sub(self) -> int:
        return self._sub

    @property
    def live_inserts(self) -> int:
        return self._live

    @property
    def occupied_slots(self) -> int:
        return 0 if self._table is None else sum(1 for _ in self._table.live_words())

    @property
    def max_clear(self) -> int:
        return self._max_clear

    @property
    def limit_delta(self) -> int:
        return self._limit_delta

    @property
    def delete_flag(self) -> bool:
        return self._deleted

    def fingerprint(self) -> tuple:
        p = self._params
        pv = None if p is None else (p.kind, p.payload, p.expect_count, p.committed_count)
        live = () if self._table is None else tuple(sorted(self._table.live_words()))
        return (pv, self._add, self._sub, self._live, live, self._max_clear,
                self._limit_delta, self._deleted)


def _tag(e: SetElement) -> int:
    return e.tag


class ReservationMap:
    """Sharded side map from address to :class:`ReservationState` for one block.

    States are created lazily on first reserve; the thread whose state wins
    the insertion records the address in its own first-touch log.
    """

    def __init__(
        self,
        values: Mapping[bytes, Value],
        modlog: Optional[ModificationLog] = None,
        shards: int = 64,
    ):
        if shards & (shards - 1):
            raise ValueError("shard count must be a power of two")
        self._values = values
        self._shards: list[dict] = [{} for _ in range(shards)]
        self._mask = shards - 1
        self.arena = HashArena()
        self.retired: list = []
        self.modlog = modlog if modlog is not None else ModificationLog()

    def state_for(self, address: bytes) -> ReservationState:
        shard = self._shards[hash(address) & self._mask]
        st = shard.get(address)
        if st is None:
            cand = ReservationState(address, self._values.get(address), self)
            st = shard.setdefault(address, cand)
            if st is cand:
                self.modlog.record(address)
        return st

    def get(self, address: bytes) -> Optional[ReservationState]:
        return self._shards[hash(address) & self._mask].get(address)

    def reserve(self, address: bytes, delta: Delta) -> Ticket:
        return self.state_for(address).reserve(delta)

    def touched(self) -> list[bytes]:
        """Every address with a reservation state, sorted."""
        return self.modlog.sorted_keys()

    def __len__(self) -> int:
        return sum(len(s) for s in self._shards)

    def states(self) -> Iterator[ReservationState]:
        for shard in self._shards:
            yield from shard.values()

    def checksum(self) -> bytes:
        h = hashlib.sha256()
        for addr in self.touched():
            h.update(addr)
            h.update(repr(self.get(addr).fingerprint()).encode())
        return h.digest()

    def reclaim(self) -> None:
        """Drop retired parameter records and all hash buffers (block end)."""
        self.retired = []
        self.arena.reset()


def rollback(ticket: Ticket) -> None:
    ticket.state.rollback(ticket)


def commit(ticket: Ticket) -> None:
    ticket.state.commit(ticket)
