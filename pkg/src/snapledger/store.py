"""Typed values, typed deltas, and per-key merge semantics.

Every key of the global store holds one of three value kinds (or nothing).
Transactions never overwrite values directly; they emit typed deltas, and all
deltas a block applies to one key are resolved together by :func:`merge_key`.
The resolution is a pure function of the delta *multiset*, so it does not
matter in which order a replica happens to see them.

Absent values are represented by ``None`` throughout the package.
"""

from __future__ import annotations

import struct
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import IntEnum
from typing import ClassVar, Iterable, NamedTuple, Optional, Union

from snapledger.errors import (
    BaseMismatch,
    DuplicateHash,
    IndexOutOfRange,
    NonnegativityViolation,
    NoSuchElement,
    Overflow,
    SizeViolation,
    TypeConflict,
)

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1
UINT64_MAX = (1 << 64) - 1
DEFAULT_SET_LIMIT = 64
MAX_SET_LIMIT = 65535

ADDRESS_LEN = 64
KEY_LEN = 32


def make_address(contract: bytes, local_key: bytes) -> bytes:
    if len(contract) != KEY_LEN or len(local_key) != KEY_LEN:
        raise ValueError("contract and local key must both be 32 bytes")
    return contract + local_key


def split_address(address: bytes) -> tuple[bytes, bytes]:
    return address[:KEY_LEN], address[KEY_LEN:]


class Kind(IntEnum):
    BYTESTRING = 1
    NONNEG_INT64 = 2
    ORDERED_SET = 3


class SetElement(NamedTuple):
    tag: int
    hash: bytes


@dataclass(frozen=True, slots=True)
class Bytestring:
    payload: bytes = b""
    kind: ClassVar[Kind] = Kind.BYTESTRING


@dataclass(frozen=True, slots=True)
class NonnegInt64:
    value: int = 0
    kind: ClassVar[Kind] = Kind.NONNEG_INT64


@dataclass(frozen=True, slots=True)
class OrderedSet:
    """Elements sorted by (tag, hash); ``limit`` bounds the element count."""

    elements: tuple = ()
    limit: int = DEFAULT_SET_LIMIT
    _hashes: Optional[frozenset] = field(default=None, compare=False, repr=False)
    kind: ClassVar[Kind] = Kind.ORDERED_SET

    def __post_init__(self):
        if not DEFAULT_SET_LIMIT <= self.limit <= MAX_SET_LIMIT:
            raise ValueError(f"set limit {self.limit} out of range")
        if len(self.elements) > self.limit:
            raise ValueError("set holds more elements than its limit")

    @classmethod
    def of(cls, elements: Iterable, limit: int = DEFAULT_SET_LIMIT) -> "OrderedSet":
        elems = tuple(sorted(SetElement(int(t), bytes(h)) for t, h in elements))
        hashes = frozenset(e.hash for e in elems)
        if len(hashes) != len(elems):
            raise ValueError("set element hashes must be distinct")
        return cls(elems, limit, hashes)

    @property
    def hashes(self) -> frozenset:
        hs = self._hashes
        if hs is None:
            hs = frozenset(e.hash for e in self.elements)
            object.__setattr__(self, "_hashes", hs)
        return hs

    def __len__(self) -> int:
        return len(self.elements)


Value = Union[Bytestring, NonnegInt64, OrderedSet]


# -- deltas -----------------------------------------------------------------


def _check_int64(x: int, what: str) -> None:
    if not INT64_MIN <= x <= INT64_MAX:
        raise ValueError(f"{what} {x} outside signed 64-bit range")


def _check_uint64(x: int, what: str) -> None:
    if not 0 <= x <= UINT64_MAX:
        raise ValueError(f"{what} {x} outside unsigned 64-bit range")


@dataclass(frozen=True, slots=True)
class StringSet:
    payload: bytes
    kind: ClassVar[Kind] = Kind.BYTESTRING


@dataclass(frozen=True, slots=True)
class Int64SetAdd:
    """Set the integer to ``base``, then add ``delta``."""

    base: int
    delta: int
    kind: ClassVar[Kind] = Kind.NONNEG_INT64

    def __post_init__(self):
        _check_int64(self.base, "base")
        _check_int64(self.delta, "delta")


@dataclass(frozen=True, slots=True)
class SetInsert:
    tag: int
    hash: bytes
    kind: ClassVar[Kind] = Kind.ORDERED_SET

    def __post_init__(self):
        _check_uint64(self.tag, "tag")
        if len(self.hash) != 32:
            raise ValueError("set element hash must be 32 bytes")


@dataclass(frozen=True, slots=True)
class SetClear:
    """Remove every element whose tag is below ``threshold``."""

    threshold: int
    kind: ClassVar[Kind] = Kind.ORDERED_SET

    def __post_init__(self):
        _check_uint64(self.threshold, "threshold")


@dataclass(frozen=True, slots=True)
class SetLimitIncrease:
    amount: int
    kind: ClassVar[Kind] = Kind.ORDERED_SET

    def __post_init__(self):
        if not 0 <= self.amount <= 0xFFFF:
            raise ValueError("limit increase must fit in 16 bits")


@dataclass(frozen=True, slots=True)
class Delete:
    kind: ClassVar[None] = None


DELETE = Delete()

Delta = Union[StringSet, Int64SetAdd, SetInsert, SetClear, SetLimitIncrease, Delete]


def default_value(kind: Kind) -> Value:
    if kind == Kind.BYTESTRING:
        return Bytestring(b"")
    if kind == Kind.NONNEG_INT64:
        return NonnegInt64(0)
    if kind == Kind.ORDERED_SET:
        return OrderedSet((), DEFAULT_SET_LIMIT)
    raise ValueError(f"unknown value kind {kind!r}")


# -- merge --------------------------------------------------------------------


def merge_key(snapshot: Optional[Value], deltas: Iterable[Delta]) -> Optional[Value]:
    """Resolve all of one key's deltas in one block against its snapshot value.

    Raises a :class:`~snapledger.errors.ConstraintViolation` subclass when the
    multiset is unresolvable. The checks are evaluated on aggregates in a fixed
    order, so both the result and the error class are permutation invariant.
    """
    deltas = list(deltas)
    if not deltas:
        return snapshot
    deleted = False
    kinds = set()
    for d in deltas:
        if d.kind is None:
            deleted = True
        else:
            kinds.add(d.kind)
    if len(kinds) > 1:
        raise TypeConflict("deltas imply different value kinds")
    if not kinds:
        return None
    (kind,) = kinds
    if snapshot is not None and snapshot.kind != kind:
        raise TypeConflict(f"delta kind {kind.name} on a {snapshot.kind.name} value")

    if kind == Kind.NONNEG_INT64:
        result = _merge_int(deltas)
    elif kind == Kind.BYTESTRING:
        payloads = {d.payload for d in deltas if d.kind is not None}
        if len(payloads) > 1:
            raise BaseMismatch("concurrent string writes disagree")
        result = Bytestring(payloads.pop())
    else:
        result = _merge_set(snapshot, deltas)
    return None if deleted else result


def _merge_int(deltas: list) -> NonnegInt64:
    bases = {d.base for d in deltas if d.kind is not None}
    if len(bases) > 1:
        raise BaseMismatch("concurrent integer writes disagree on base")
    (x,) = bases
    adds = 0
    subs = 0
    any_negative = False
    for d in deltas:
        if d.kind is None:
            continue
        if d.delta > 0:
            adds += d.delta
        elif d.delta < 0:
            subs -= d.delta
            any_negative = True
    if x + adds > INT64_MAX:
        raise Overflow("integer exceeds signed 64-bit range")
    if x >= 0:
        if x - subs < 0:
            raise NonnegativityViolation(f"base {x} cannot cover {subs}")
    elif any_negative:
        raise NonnegativityViolation("subtraction from a negative base")
    return NonnegInt64(x + adds - subs)


def _merge_set(snapshot: Optional[OrderedSet], deltas: list) -> OrderedSet:
    base = snapshot if snapshot is not None else OrderedSet()
    present = base.hashes
    inserted: dict[bytes, int] = {}
    clear = 0
    limit_add = 0
    for d in deltas:
        if isinstance(d, SetInsert):
            if d.hash in present or d.hash in inserted:
                raise DuplicateHash(f"hash {d.hash.hex()} inserted twice")
            inserted[d.hash] = d.tag
        elif isinstance(d, SetClear):
            if d.threshold > clear:
                clear = d.threshold
        elif isinstance(d, SetLimitIncrease):
            limit_add += d.amount
    if len(base.elements) + len(inserted) > base.limit:
        raise SizeViolation(
            f"{len(base.elements)} + {len(inserted)} elements exceed limit {base.limit}"
        )
    if inserted:
        elements = sorted(
            list(base.elements) + [SetElement(t, h) for h, t in inserted.items()]
        )
    else:
        elements = list(base.elements)
    if clear:
        cut = bisect_left(elements, clear, key=_tag)
        elements = elements[cut:]
    limit = min(MAX_SET_LIMIT, base.limit + limit_add)
    return OrderedSet(tuple(elements), limit)


def _tag(e: SetElement) -> int:
    return e.tag


# -- reads --------------------------------------------------------------------


def set_get_index(v: OrderedSet, index: int) -> SetElement:
    if not 0 <= index < len(v.elements):
        raise IndexOutOfRange(f"index {index} in a set of {len(v.elements)}")
    return v.elements[index]


def set_lookup(v: OrderedSet, threshold: int) -> SetElement:
    """First element whose tag is at least ``threshold``."""
    i = bisect_left(v.elements, threshold, key=_tag)
    if i == len(v.elements):
        raise NoSuchElement(f"no element with tag >= {threshold}")
    return v.elements[i]


# -- canonical encoding -------------------------------------------------------

_U32 = struct.Struct(">I")
_I64 = struct.Struct(">q")
_SET_HEADER = struct.Struct(">HI")
_ELEM = struct.Struct(">Q32s")


def serialize_value(v: Value) -> bytes:
    """Canonical encoding: one kind byte, then a kind-specific body."""
    kind = v.kind
    if kind == Kind.NONNEG_INT64:
        return b"\x02" + _I64.pack(v.value)
    if kind == Kind.BYTESTRING:
        return b"\x01" + _U32.pack(len(v.payload)) + v.payload
    pack = _ELEM.pack
    return b"".join(
        [b"\x03", _SET_HEADER.pack(v.limit, len(v.elements))]
        + [pack(t, h) for t, h in v.elements]
    )


def deserialize_value(data: bytes) -> Value:
    kind = data[0]
    if kind == Kind.NONNEG_INT64:
        if len(data) != 9:
            raise ValueError("bad integer encoding")
        return NonnegInt64(_I64.unpack_from(data, 1)[0])
    if kind == Kind.BYTESTRING:
        (n,) = _U32.unpack_from(data, 1)
        if len(data) != 5 + n:
            raise ValueError("bad bytestring encoding")
        return Bytestring(bytes(data[5:]))
    if kind == Kind.ORDERED_SET:
        limit, count = _SET_HEADER.unpack_from(data, 1)
        if len(data) != 7 + 40 * count:
            raise ValueError("bad set encoding")
        elems = tuple(SetElement(t, h) for t, h in _ELEM.iter_unpack(data[7:]))
        return OrderedSet(elems, limit)
    raise ValueError(f"unknown kind byte {kind}")
