"""Append-only block and trie-node logs, and replay.

Two files live in a log directory:

* ``nodes.log`` holds one record per trie node, written the first time the node
  is part of a finalized state trie. Each node gets a fresh 64-bit id; branch
  records refer to their children by id, and children are always written
  before their parents.
* ``blocks.log`` holds one record per block: its number, the id of the state
  trie's root node (0 for the empty trie), the state root hash, and the
  block's canonical encoding.

Every record is framed as ``u32 length | u32 crc32 | payload`` so a torn or
damaged tail is detected at a precise byte offset.

Node payload: ``u64 id | u64 block | u8 kind | u16 nibbles | packed path``,
followed for a leaf (kind 1) by ``u32 len | leaf bytes`` and for a branch
(kind 2) by ``u16 child bitmap | u64 child id`` per present child.
"""

from __future__ import annotations

import itertools
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Optional

from snapledger.errors import LogCorruption
from snapledger.trie import (
    ID_SERIAL_SHIFT,
    Branch,
    Leaf,
    Node,
    Trie,
    branch_path,
    leaf_path,
    node_hash,
    unlogged_nodes,
)

NODES_FILE = "nodes.log"
BLOCKS_FILE = "blocks.log"

_FRAME = struct.Struct(">II")
_NODE_HEAD = struct.Struct(">QQBH")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_BLOCK_HEAD = struct.Struct(">QQ32s")

KIND_LEAF = 1
KIND_BRANCH = 2


def frame(payload: bytes) -> bytes:
    return _FRAME.pack(len(payload), zlib.crc32(payload)) + payload


def read_frames(path: Path) -> Iterator[tuple[int, bytes]]:
    """Yield ``(offset, payload)`` for every record; raise at the first bad one."""
    data = path.read_bytes() if path.exists() else b""
    pos = 0
    end = len(data)
    while pos < end:
        if end - pos < _FRAME.size:
            raise LogCorruption(str(path), pos, "truncated record header")
        n, crc = _FRAME.unpack_from(data, pos)
        body = pos + _FRAME.size
        if end - body < n:
            raise LogCorruption(str(path), pos, "truncated record payload")
        payload = data[body : body + n]
        if zlib.crc32(payload) != crc:
            raise LogCorruption(str(path), pos, "checksum mismatch")
        yield pos, payload
        pos = body + n


def encode_node(node: Node, block_number: int) -> bytes:
    if type(node) is Leaf:
        n, packed = leaf_path(node)
        return b"".join(
            (
                _NODE_HEAD.pack(node.nid, block_number, KIND_LEAF, n),
                packed,
                _U32.pack(len(node.payload)),
                node.payload,
            )
        )
    n, packed = branch_path(node)
    bitmap = 0
    ids = []
    for i, c in enumerate(node.children):
        if c is not None:
            bitmap |= 1 << i
            ids.append(_U64.pack(c.nid))
    return b"".join(
        [_NODE_HEAD.pack(node.nid, block_number, KIND_BRANCH, n), packed, _U16.pack(bitmap)]
        + ids
    )


@dataclass(frozen=True)
class NodeLogRecord:
    id: int
    block_number: int
    kind: int
    nibbles: str  # path fragment as a hex string, one char per nibble
    payload: bytes = b""
    children: tuple = ()  # (nibble, child id) pairs

    @classmethod
    def decode(cls, data: bytes) -> "NodeLogRecord":
        nid, block, kind, n = _NODE_HEAD.unpack_from(data, 0)
        pos = _NODE_HEAD.size
        plen = (n + 1) >> 1
        nibbles = data[pos : pos + plen].hex()[:n]
        pos += plen
        if kind == KIND_LEAF:
            (ln,) = _U32.unpack_from(data, pos)
            pos += 4
            payload = data[pos : pos + ln]
            if len(payload) != ln or pos + ln != len(data):
                raise ValueError("bad leaf record")
            return cls(nid, block, kind, nibbles, payload=payload)
        if kind != KIND_BRANCH:
            raise ValueError(f"unknown node kind {kind}")
        (bitmap,) = _U16.unpack_from(data, pos)
        pos += 2
        children = []
        for i in range(16):
            if bitmap >> i & 1:
                children.append((i, _U64.unpack_from(data, pos)[0]))
                pos += 8
        if pos != len(data):
            raise ValueError("bad branch record")
        return cls(nid, block, kind, nibbles, children=tuple(children))


@dataclass(frozen=True)
class BlockLogRecord:
    block_number: int
    root_id: int
    state_root: bytes
    block_bytes: bytes

    def encode(self) -> bytes:
        return _BLOCK_HEAD.pack(self.block_number, self.root_id, self.state_root) + self.block_bytes

    @classmethod
    def decode(cls, data: bytes) -> "BlockLogRecord":
        number, root_id, state_root = _BLOCK_HEAD.unpack_from(data, 0)
        return cls(number, root_id, state_root, data[_BLOCK_HEAD.size :])


_serials = itertools.count(1)


class PersistLog:
    """Writer side of a log directory.

    Node ids are ``serial << 48 | sequence``. Each log picks a serial that is
    fresh within the process (or reuses the one found in an existing log), so
    nodes shared between tries logged to different logs are told apart.
    Reopening a directory continues its id sequence.
    """

    def __init__(self, directory: str | os.PathLike, fsync: bool = False):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        last = 0
        for _, payload in read_frames(self.dir / NODES_FILE):
            last = max(last, _U64.unpack_from(payload, 0)[0])
        if last:
            self.serial = last >> ID_SERIAL_SHIFT
            self.next_id = last + 1
        else:
            self.serial = next(_serials)
            self.next_id = (self.serial << ID_SERIAL_SHIFT) | 1
        self._nodes: BinaryIO = open(self.dir / NODES_FILE, "ab")
        self._blocks: BinaryIO = open(self.dir / BLOCKS_FILE, "ab")
        self.nodes_written = 0
        self.bytes_written = 0

    def persist_block(self, block_number: int, block_bytes: bytes, state: Trie) -> int:
        """Log every not-yet-logged node of ``state`` and then the block record.

        Returns the number of node records written. A node is logged at most
        once over the log's lifetime, so in particular at most once per block.
        """
        dirty = unlogged_nodes(state.root, self.serial)
        out = []
        nid = self.next_id
        for node in dirty:
            node_hash(node)
            node.nid = nid
            nid += 1
            out.append(frame(encode_node(node, block_number)))
        self.next_id = nid
        buf = b"".join(out)
        self._nodes.write(buf)
        self._nodes.flush()
        root_id = 0 if state.root is None else state.root.nid
        rec = frame(
            BlockLogRecord(block_number, root_id, state.root_hash(), block_bytes).encode()
        )
        self._blocks.write(rec)
        self._blocks.flush()
        if self.fsync:
            os.fsync(self._nodes.fileno())
            os.fsync(self._blocks.fileno())
        self.nodes_written += len(dirty)
        self.bytes_written += len(buf) + len(rec)
        return len(dirty)

    def close(self) -> None:
        self._nodes.close()
        self._blocks.close()

    def __enter__(self) -> "PersistLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class Replay:
    state: Trie
    blocks: list = field(default_factory=list)  # BlockLogRecord, in log order
    node_count: int = 0

    @property
    def block_number(self) -> int:
        return self.blocks[-1].block_number if self.blocks else 0


def replay_log(directory: str | os.PathLike, key_len: int = 64) -> Replay:
    """Rebuild the latest state trie from a log directory.

    Raises :class:`LogCorruption` at the first damaged record, at a record that
    refers to an id not logged before it, or if the rebuilt root hash differs
    from the one recorded with the block.
    """
    d = Path(directory)
    nodes_path = d / NODES_FILE
    records: dict[int, tuple[int, NodeLogRecord]] = {}
    for pos, payload in read_frames(nodes_path):
        try:
            rec = NodeLogRecord.decode(payload)
        except (ValueError, struct.error) as e:
            raise LogCorruption(str(nodes_path), pos, f"undecodable node record: {e}")
        for _, cid in rec.children:
            if cid not in records:
                raise LogCorruption(str(nodes_path), pos, f"child id {cid} not logged earlier")
        records[rec.id] = (pos, rec)

    blocks_path = d / BLOCKS_FILE
    blocks = []
    for pos, payload in read_frames(blocks_path):
        try:
            blk = BlockLogRecord.decode(payload)
        except struct.error as e:
            raise LogCorruption(str(blocks_path), pos, f"undecodable block record: {e}")
        if blk.root_id and blk.root_id not in records:
            raise LogCorruption(str(blocks_path), pos, f"root id {blk.root_id} not logged")
        blocks.append((pos, blk))

    if not blocks:
        return Replay(Trie(None, key_len), [], len(records))
    pos, last = blocks[-1]
    memo: dict[int, Node] = {}
    root = _materialize(records, memo, last.root_id, "", 0) if last.root_id else None
    trie = Trie(root, key_len)
    if trie.root_hash() != last.state_root:
        raise LogCorruption(str(blocks_path), pos, "replayed state root does not match")
    return Replay(trie, [b for _, b in blocks], len(records))


def _materialize(records: dict, memo: dict, nid: int, prefix: str, depth: int) -> Node:
    # iterative over the branch structure would save stack, but depth is bounded
    # by the key's nibble count, far below the recursion limit
    node = memo.get(nid)
    if node is not None:
        return node
    _, rec = records[nid]
    path = prefix + rec.nibbles
    if rec.kind == KIND_LEAF:
        node = Leaf(bytes.fromhex(path), rec.payload, depth)
    else:
        split = depth + len(rec.nibbles)
        children: list[Optional[Node]] = [None] * 16
        for nib, cid in rec.children:
            children[nib] = _materialize(records, memo, cid, path + "%x" % nib, split + 1)
        ref = _any_key(next(c for c in children if c is not None))
        node = Branch(depth, split, tuple(children), ref)
    node.nid = nid
    memo[nid] = node
    return node


def _any_key(node: Node) -> bytes:
    return node.key if type(node) is Leaf else node.ref
