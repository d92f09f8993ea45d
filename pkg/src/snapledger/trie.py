"""Merkle-Patricia tries over fixed-length byte keys.

Nodes are immutable once hashed: updates copy the path from the root to each
changed leaf and share everything else, so a :class:`Trie` handle taken before
an update keeps seeing the old content. The shape is canonical (a branch
always has at least two children and a maximal shared prefix), which makes the
root hash a function of the key/leaf mapping only.

Node encodings, hashed with SHA-256:

* empty: ``00``
* leaf: ``01 | u16 nibble count | packed path | u32 len | payload``
* branch: ``02 | u16 nibble count | packed path | u16 child bitmap | child hashes``

Packed paths hold two nibbles per byte, high nibble first, zero-padded when the
count is odd.
"""

from __future__ import annotations

import struct
import threading
from bisect import bisect_right
from concurrent.futures import Executor
from hashlib import sha256
from typing import Iterable, Iterator, Optional, Union

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")

EMPTY_ROOT = sha256(b"\x00").digest()


class Leaf:
    __slots__ = ("key", "payload", "depth", "hash", "nid")

    def __init__(self, key: bytes, payload: bytes, depth: int):
        self.key = key
        self.payload = payload
        self.depth = depth
        self.hash: Optional[bytes] = None
        self.nid: Optional[int] = None

    def __repr__(self) -> str:
        return f"Leaf({self.key.hex()[:12]}…@{self.depth})"


class Branch:
    """Children at nibble ``split``; ``ref`` is any key below, for the prefix."""

    __slots__ = ("depth", "split", "children", "ref", "hash", "nid")

    def __init__(self, depth: int, split: int, children: tuple, ref: bytes):
        self.depth = depth
        self.split = split
        self.children = children
        self.ref = ref
        self.hash: Optional[bytes] = None
        self.nid: Optional[int] = None

    def __repr__(self) -> str:
        n = sum(c is not None for c in self.children)
        return f"Branch({self.depth}->{self.split}, {n} children)"


Node = Union[Leaf, Branch]


def nibble(key: bytes, i: int) -> int:
    b = key[i >> 1]
    return b & 15 if i & 1 else b >> 4


def first_diff_nibble(a: bytes, b: bytes) -> int:
    x = int.from_bytes(a, "big") ^ int.from_bytes(b, "big")
    n = len(a) * 8
    if not x:
        return n >> 2
    return (n - x.bit_length()) >> 2


def _under(key: bytes, ref: bytes, n: int) -> bool:
    """Whether ``key`` and ``ref`` agree on their first ``n`` nibbles."""
    b = n >> 1
    if key[:b] != ref[:b]:
        return False
    return not n & 1 or (key[b] ^ ref[b]) < 16


def pack_nibbles(key: bytes, start: int, end: int) -> bytes:
    if not start & 1:
        if not end & 1:
            return key[start >> 1 : end >> 1]
        return key[start >> 1 : end >> 1] + bytes((key[end >> 1] & 0xF0,))
    hx = key.hex()[start:end]
    if len(hx) & 1:
        hx += "0"
    return bytes.fromhex(hx)


def leaf_path(leaf: Leaf) -> tuple[int, bytes]:
    end = len(leaf.key) * 2
    return end - leaf.depth, pack_nibbles(leaf.key, leaf.depth, end)


def branch_path(br: Branch) -> tuple[int, bytes]:
    return br.split - br.depth, pack_nibbles(br.ref, br.depth, br.split)


_BITS = tuple(1 << i for i in range(16))
_BRANCH_NO_PATH = b"\x02" + _U16.pack(0)


def node_hash(node: Optional[Node]) -> bytes:
    if node is None:
        return EMPTY_ROOT
    h = node.hash
    if h is not None:
        return h
    if type(node) is Leaf:
        # a leaf's path always runs to the end of its key
        key, d, payload = node.key, node.depth, node.payload
        packed = key[d >> 1 :] if not d & 1 else bytes.fromhex(key.hex()[d:] + "0")
        h = sha256(
            b"\x01" + _U16.pack(2 * len(key) - d) + packed + _U32.pack(len(payload)) + payload
        ).digest()
    else:
        children = node.children
        bitmap = sum([bit for bit, c in zip(_BITS, children) if c is not None])
        parts = [c.hash or node_hash(c) for c in children if c is not None]
        if node.split == node.depth:
            head = _BRANCH_NO_PATH
        else:
            n, packed = branch_path(node)
            head = b"\x02" + _U16.pack(n) + packed
        h = sha256(head + _U16.pack(bitmap) + b"".join(parts)).digest()
    node.hash = h
    return h


# -- construction -------------------------------------------------------------


def _groups(items: list, lo: int, hi: int, pos: int) -> Iterator[tuple[int, int, int]]:
    """Split sorted ``items[lo:hi]`` into runs sharing the nibble at ``pos``."""
    if hi - lo > 32:
        key = lambda it: nibble(it[0], pos)  # noqa: E731
        i = lo
        while i < hi:
            nib = nibble(items[i][0], pos)
            j = bisect_right(items, nib, i + 1, hi, key=key)
            yield nib, i, j
            i = j
        return
    i = lo
    while i < hi:
        nib = nibble(items[i][0], pos)
        j = i + 1
        while j < hi and nibble(items[j][0], pos) == nib:
            j += 1
        yield nib, i, j
        i = j


def build(items: list, lo: int, hi: int, depth: int) -> Optional[Node]:
    """Canonical subtree for sorted, distinct ``(key, payload)`` items."""
    n = hi - lo
    if n == 0:
        return None
    if n == 1:
        k, p = items[lo]
        return Leaf(k, p, depth)
    first = items[lo][0]
    split = first_diff_nibble(first, items[hi - 1][0])
    children = [None] * 16
    for nib, i, j in _groups(items, lo, hi, split):
        children[nib] = build(items, i, j, split + 1)
    return Branch(depth, split, tuple(children), first)


def _build_live(items: list, lo: int, hi: int, depth: int) -> Optional[Node]:
    live = [it for it in items[lo:hi] if it[1] is not None]
    return build(live, 0, len(live), depth)


def _normalize(depth: int, split: int, children: list, ref: bytes) -> Optional[Node]:
    live = [c for c in children if c is not None]
    if not live:
        return None
    if len(live) == 1:
        c = live[0]
        if type(c) is Leaf:
            return c if c.depth == depth else Leaf(c.key, c.payload, depth)
        return Branch(depth, c.split, c.children, c.ref)
    return Branch(depth, split, tuple(children), ref)


def update(node: Optional[Node], items: list, lo: int, hi: int, depth: int) -> Optional[Node]:
    """Apply sorted, distinct ``(key, payload_or_None)`` items; None deletes.

    Returns ``node`` itself when nothing below it changes.
    """
    if lo >= hi:
        return node
    if hi - lo == 1:
        return _update_one(node, items, lo, depth)
    if node is None:
        return _build_live(items, lo, hi, depth)
    if type(node) is Leaf:
        return _update_leaf(node, items, lo, hi, depth)
    return _update_branch(node, items, lo, hi, depth)


def _update_branch(node: Branch, items: list, lo: int, hi: int, depth: int) -> Optional[Node]:
    ref = node.ref
    split = node.split
    if _under(items[lo][0], ref, split) and _under(items[hi - 1][0], ref, split):
        children = list(node.children)
        changed = emptied = False
        for nib, i, j in _groups(items, lo, hi, split):
            c = children[nib]
            nc = update(c, items, i, j, split + 1)
            if nc is not c:
                children[nib] = nc
                changed = True
                if nc is None:
                    emptied = True
        if not changed:
            return node
        if emptied:
            return _normalize(depth, split, children, ref)
        return Branch(depth, split, tuple(children), ref)
    m = min(first_diff_nibble(items[lo][0], ref), first_diff_nibble(items[hi - 1][0], ref))
    # some items leave the prefix; those that are deletions name absent keys
    inside_lo = inside_hi = None
    diverging_live = False
    for i in range(lo, hi):
        k, p = items[i]
        if first_diff_nibble(k, ref) >= split:
            if inside_lo is None:
                inside_lo = i
            inside_hi = i + 1
        elif p is not None:
            diverging_live = True
    if not diverging_live:
        if inside_lo is None:
            return node
        return update(node, items, inside_lo, inside_hi, depth)
    old = Branch(m + 1, split, node.children, ref)
    ref_nib = nibble(ref, m)
    children = [None] * 16
    children[ref_nib] = old
    for nib, i, j in _groups(items, lo, hi, m):
        if nib == ref_nib:
            children[nib] = update(old, items, i, j, m + 1)
        else:
            children[nib] = _build_live(items, i, j, m + 1)
    return _normalize(depth, m, children, ref)


def _update_one(node: Optional[Node], items: list, i: int, depth: int) -> Optional[Node]:
    """:func:`update` for a single item, the common case deep in a large trie."""
    k, p = items[i]
    if node is None:
        return None if p is None else Leaf(k, p, depth)
    if type(node) is Leaf:
        if node.key == k:
            if p is None:
                return None
            return node if p == node.payload else Leaf(k, p, depth)
        if p is None:
            return node
        return _update_leaf(node, items, i, i + 1, depth)
    split = node.split
    if not _under(k, node.ref, split):
        return _update_branch(node, items, i, i + 1, depth)
    nib = nibble(k, split)
    c = node.children[nib]
    nc = _update_one(c, items, i, split + 1)
    if nc is c:
        return node
    children = list(node.children)
    children[nib] = nc
    if nc is None:
        return _normalize(depth, split, children, node.ref)
    return Branch(depth, split, tuple(children), node.ref)


def _update_leaf(leaf: Leaf, items: list, lo: int, hi: int, depth: int) -> Optional[Node]:
    lk = leaf.key
    merged = []
    placed = False
    touched = False
    for i in range(lo, hi):
        k, p = items[i]
        if k == lk:
            placed = True
            touched = True
            if p is not None:
                if p == leaf.payload and hi - lo == 1:
                    return leaf
                merged.append((k, p))
            continue
        if not placed and k > lk:
            merged.append((lk, leaf.payload))
            placed = True
        if p is not None:
            merged.append((k, p))
            touched = True
    if not touched:
        return leaf
    if not placed:
        merged.append((lk, leaf.payload))
    if len(merged) == 1 and merged[0][0] == lk and merged[0][1] == leaf.payload:
        return leaf
    return build(merged, 0, len(merged), depth)


def lookup(node: Optional[Node], key: bytes) -> Optional[bytes]:
    while node is not None:
        if type(node) is Leaf:
            return node.payload if node.key == key else None
        if first_diff_nibble(key, node.ref) < node.split:
            return None
        node = node.children[nibble(key, node.split)]
    return None


def iter_leaves(node: Optional[Node]) -> Iterator[Leaf]:
    if node is None:
        return
    stack = [node]
    while stack:
        n = stack.pop()
        if type(n) is Leaf:
            yield n
        else:
            stack.extend(c for c in reversed(n.children) if c is not None)


def iter_nodes(node: Optional[Node]) -> Iterator[Node]:
    if node is None:
        return
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        if type(n) is Branch:
            stack.extend(c for c in n.children if c is not None)


ID_SERIAL_SHIFT = 48


def unlogged_nodes(node: Optional[Node], serial: int = 0) -> list[Node]:
    """Nodes not yet logged under log ``serial``, children before parents.

    A node id carries its log's serial in the bits above ``ID_SERIAL_SHIFT``.
    A node logged under the serial has all its descendants logged there too,
    so the walk stops at such nodes.
    """

    def logged(n: Node) -> bool:
        return n.nid is not None and n.nid >> ID_SERIAL_SHIFT == serial

    out: list[Node] = []
    if node is None or logged(node):
        return out
    stack: list = [(node, False)]
    while stack:
        n, expanded = stack.pop()
        if expanded or type(n) is Leaf:
            out.append(n)
            continue
        stack.append((n, True))
        for c in reversed(n.children):
            if c is not None and not logged(c):
                stack.append((c, False))
    return out


class Trie:
    """Mutable handle over an immutable node graph.

    ``copy()`` is O(1); copies never observe each other's later updates.
    """

    __slots__ = ("root", "key_len")

    def __init__(self, root: Optional[Node] = None, key_len: int = 64):
        self.root = root
        self.key_len = key_len

    @classmethod
    def from_items(cls, items: Iterable[tuple[bytes, bytes]], key_len: int = 64) -> "Trie":
        """Build from scratch (sorted and deduplicated; the last write wins)."""
        d = dict(items)
        for k in d:
            if len(k) != key_len:
                raise ValueError(f"key of length {len(k)}, expected {key_len}")
        srt = sorted(d.items())
        return cls(build(srt, 0, len(srt), 0), key_len)

    def copy(self) -> "Trie":
        return Trie(self.root, self.key_len)

    def _check(self, key: bytes) -> None:
        if len(key) != self.key_len:
            raise ValueError(f"key of length {len(key)}, expected {self.key_len}")

    def get(self, key: bytes) -> Optional[bytes]:
        self._check(key)
        return lookup(self.root, key)

    def put(self, key: bytes, leaf: bytes) -> None:
        self._check(key)
        self.root = update(self.root, [(key, bytes(leaf))], 0, 1, 0)

    def delete(self, key: bytes) -> None:
        self._check(key)
        self.root = update(self.root, [(key, None)], 0, 1, 0)

    def update(self, items: Iterable[tuple[bytes, Optional[bytes]]]) -> None:
        """Batch put/delete; items need not be sorted but keys must be distinct."""
        srt = sorted(items, key=_first)
        for i in range(1, len(srt)):
            if srt[i][0] == srt[i - 1][0]:
                raise ValueError("duplicate key in batch update")
        if srt:
            self._check(srt[0][0])
        self.root = update(self.root, srt, 0, len(srt), 0)

    def update_sorted(self, items: list) -> None:
        """Batch update from items already sorted by distinct key."""
        self.root = update(self.root, items, 0, len(items), 0)

    def root_hash(self, executor: Optional[Executor] = None) -> bytes:
        root = self.root
        if executor is not None and type(root) is Branch and root.hash is None:
            pending = [c for c in root.children if c is not None and c.hash is None]
            if len(pending) > 1:
                list(executor.map(node_hash, pending))
        return node_hash(root)

    def items(self) -> Iterator[tuple[bytes, bytes]]:
        for leaf in iter_leaves(self.root):
            yield leaf.key, leaf.payload

    def keys(self) -> Iterator[bytes]:
        for leaf in iter_leaves(self.root):
            yield leaf.key

    def __len__(self) -> int:
        return sum(1 for _ in iter_leaves(self.root))

    def __contains__(self, key: bytes) -> bool:
        return lookup(self.root, key) is not None


def _first(item):
    return item[0]


class ModificationLog:
    """Records which keys a block touched and enumerates them in key order.

    ``record`` may be called from any worker; each thread appends to its own
    buffer. ``seal`` (after the transaction phase) folds the buffers into a trie
    of the touched keys with empty leaves, whose prefixes line up with the
    state trie's.
    """

    def __init__(self, key_len: int = 64):
        self.key_len = key_len
        self._local = threading.local()
        self._buffers: list[list] = []
        self._trie: Optional[Trie] = None
        self._sorted: list[bytes] = []

    def record(self, key: bytes) -> None:
        buf = getattr(self._local, "buf", None)
        if buf is None:
            buf = self._local.buf = []
            self._buffers.append(buf)
        buf.append(key)

    def seal(self) -> Trie:
        if self._trie is None:
            keys = set()
            for buf in self._buffers:
                keys.update(buf)
            srt = self._sorted = sorted(keys)
            self._trie = Trie(build([(k, b"") for k in srt], 0, len(srt), 0), self.key_len)
        return self._trie

    def iterate_modified(self) -> Iterator[bytes]:
        return self.seal().keys()

    def sorted_keys(self) -> list[bytes]:
        self.seal()
        return self._sorted

    def root_hash(self, executor: Optional[Executor] = None) -> bytes:
        return self.seal().root_hash(executor)
