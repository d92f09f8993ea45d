"""Single-word atomic cells.

CPython exposes no hardware compare-and-swap, so every read-modify-write on a
word is performed under one mutex drawn from a fixed striped pool, held only
for that single update. No caller ever holds two stripes at once and all
algorithms built on top are CAS/fetch-op loops, so the structure matches the
native-atomics version. Plain loads are single bytecode reads and take no lock.
"""

from __future__ import annotations

from threading import Lock
from typing import Any

_POOL_BITS = 12
_POOL_MASK = (1 << _POOL_BITS) - 1
_POOL = [Lock() for _ in range(1 << _POOL_BITS)]


def stripe_for(obj: object, i: int = 0) -> Lock:
    """The pool mutex emulating atomicity for word ``i`` of ``obj``."""
    return _POOL[((id(obj) >> 4) + i) & _POOL_MASK]


class AtomicWord:
    __slots__ = ("_value", "_lock")

    def __init__(self, value: Any = 0):
        self._value = value
        self._lock = stripe_for(self)

    def load(self) -> Any:
        return self._value

    def store(self, value: Any) -> None:
        with self._lock:
            self._value = value

    def compare_and_swap(self, expected: Any, new: Any) -> bool:
        # references compare by identity; ints by value
        with self._lock:
            cur = self._value
            if cur is expected or (type(cur) is int and cur == expected):
                self._value = new
                return True
            return False

    def fetch_add(self, delta: int) -> int:
        with self._lock:
            old = self._value
            self._value = old + delta
            return old

    def fetch_max(self, x: int) -> int:
        with self._lock:
            old = self._value
            if x > old:
                self._value = x
            return old

    def __repr__(self) -> str:
        return f"AtomicWord({self._value!r})"


class AtomicArray:
    """Fixed-length array of independently CAS-able words."""

    __slots__ = ("_items", "_salt")

    def __init__(self, length: int, fill: Any = 0):
        self._items = [fill] * length
        self._salt = id(self) >> 4

    def __len__(self) -> int:
        return len(self._items)

    def load(self, i: int) -> Any:
        return self._items[i]

    def compare_and_swap(self, i: int, expected: Any, new: Any) -> bool:
        with _POOL[(self._salt + i) & _POOL_MASK]:
            cur = self._items[i]
            if cur is expected or (type(cur) is int and cur == expected):
                self._items[i] = new
                return True
            return False

    def snapshot(self) -> list:
        return list(self._items)
