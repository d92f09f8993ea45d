"""Snapshot lifecycle and the block pipeline.

Every block runs in two phases separated by a barrier. In the transaction
phase, workers execute programs against the immutable snapshot and feed the
emitted deltas through the reserve/commit protocol of :mod:`snapledger.rc`.
In the finalize phase, the touched keys are split into contiguous ranges,
one per worker, and each key's reservation state is resolved into its new
value. The state trie, modification trie and transaction trie are then
updated and their roots computed.

Proposal drops individual transactions that fail to reserve. Execution of a
given block treats any failure as fatal for the whole block.
"""

from __future__ import annotations

import itertools
import struct
import threading
import time
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence

from snapledger.atomics import AtomicWord
from snapledger.block import Block, TransactionRecord
from snapledger.contracts.host import Contract, root_context
from snapledger.errors import BlockInvalid, ConstraintViolation, ProgramAbort
from snapledger.persist import PersistLog
from snapledger.rc import UNCHANGED, Mode, ReservationMap
from snapledger.store import (
    INT64_MAX,
    Int64SetAdd,
    Kind,
    SetInsert,
    StringSet,
    Value,
    serialize_value,
)
from snapledger.trie import Trie, build

_U32 = struct.Struct(">I")

_GONE = object()


class StateMap(Mapping):
    """Read-only key-value state: a parent mapping plus one block's changes.

    Each block's snapshot layers its changes over the previous state instead
    of copying it, so building a snapshot costs time in the number of changed
    keys. Chains are flattened into a plain dict every ``MAX_DEPTH`` layers,
    which caps lookups at that many probes.
    """

    MAX_DEPTH = 8
    __slots__ = ("_parent", "_top", "_len", "_depth")

    def __init__(self, parent: Mapping, changes: Iterable[tuple[bytes, Optional[Value]]]):
        top = {}
        n = len(parent)
        for k, v in changes:
            was = k in parent if k not in top else top[k] is not _GONE
            if v is None:
                if was:
                    n -= 1
                top[k] = _GONE
            else:
                if not was:
                    n += 1
                top[k] = v
        depth = parent._depth + 1 if isinstance(parent, StateMap) else 1
        if depth > self.MAX_DEPTH:
            flat = dict(parent)
            for k, v in top.items():
                if v is _GONE:
                    flat.pop(k, None)
                else:
                    flat[k] = v
            parent, top, depth = flat, {}, 1
        self._parent = parent
        self._top = top
        self._len = n
        self._depth = depth

    def get(self, key, default=None):
        v = self._top.get(key, None)
        if v is None:
            return self._parent.get(key, default)
        return default if v is _GONE else v

    def __getitem__(self, key):
        v = self.get(key, _GONE)
        if v is _GONE:
            raise KeyError(key)
        return v

    def __contains__(self, key) -> bool:
        return self.get(key, _GONE) is not _GONE

    def __len__(self) -> int:
        return self._len

    def __iter__(self) -> Iterator[bytes]:
        top = self._top
        for k, v in top.items():
            if v is not _GONE:
                yield k
        for k in self._parent:
            if k not in top:
                yield k


@dataclass(frozen=True)
class Snapshot:
    """Key-value state as of the end of ``block_number``. Never mutated."""

    block_number: int
    values: Mapping[bytes, Value]
    trie: Trie

    @classmethod
    def genesis(cls, values: Mapping[bytes, Value], block_number: int = 0) -> "Snapshot":
        vals = dict(values)
        items = sorted((k, serialize_value(v)) for k, v in vals.items())
        return cls(block_number, vals, Trie(build(items, 0, len(items), 0)))

    def get(self, address: bytes) -> Optional[Value]:
        return self.values.get(address)

    @property
    def state_root(self) -> bytes:
        return self.trie.root_hash()

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class BlockStats:
    block_number: int = 0
    drawn: int = 0
    admitted: int = 0
    aborted: int = 0
    conflicted: int = 0
    over_capacity: int = 0
    touched_keys: int = 0
    changed_keys: int = 0
    nodes_logged: int = 0
    exec_seconds: float = 0.0
    finalize_seconds: float = 0.0
    persist_seconds: float = 0.0

    @property
    def dropped(self) -> int:
        return self.aborted + self.conflicted + self.over_capacity

    @property
    def seconds(self) -> float:
        return self.exec_seconds + self.finalize_seconds + self.persist_seconds


@dataclass
class _WorkerTally:
    admitted: list = field(default_factory=list)
    drawn: int = 0
    aborted: int = 0
    conflicted: int = 0
    over_capacity: int = 0


def tx_trie(transactions: Iterable[TransactionRecord]) -> Trie:
    """Trie keyed by tx hash; the leaf is the multiplicity as a u32."""
    counts = Counter(tx.tx_hash for tx in transactions)
    items = sorted((h, _U32.pack(c)) for h, c in counts.items())
    return Trie(build(items, 0, len(items), 0), key_len=32)


class Engine:
    """Drives blocks for one registry of contracts with a fixed worker pool."""

    def __init__(
        self,
        registry: Mapping[bytes, Contract],
        threads: int = 1,
        log: Optional[PersistLog] = None,
    ):
        if threads < 1:
            raise ValueError("need at least one worker thread")
        self.registry = registry
        self.threads = threads
        self.log = log
        self._pool = ThreadPoolExecutor(threads) if threads > 1 else None
        self.last_stats: Optional[BlockStats] = None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self) -> "Engine":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- worker pool ----------------------------------------------------------

    def _fan_out(self, tasks: Sequence[Callable[[], object]]) -> list:
        """Run the tasks on the pool and wait for all of them (the phase barrier)."""
        if self._pool is None or len(tasks) == 1:
            return [t() for t in tasks]
        futures = [self._pool.submit(t) for t in tasks]
        return [f.result() for f in futures]

    # -- transactions -------------------------------------------------------

    def run_transaction(self, snapshot: Snapshot, tx: TransactionRecord) -> list:
        """Execute ``tx`` against ``snapshot``; returns its buffered ``(address, delta)``s.

        Nothing is reserved here. Any failure inside the program, explicit or
        not, surfaces as :class:`ProgramAbort`.
        """
        program = self.registry.get(tx.contract)
        if program is None:
            raise ProgramAbort(f"no contract at {tx.contract.hex()}")
        ctx = root_context(self.registry, snapshot.values, snapshot.block_number + 1, tx)
        try:
            program.invoke(ctx, tx.method, tx.input)
        except ProgramAbort:
            raise
        except Exception as e:
            raise ProgramAbort(f"trap: {e!r}") from e
        return ctx.deltas

    # -- proposal -------------------------------------------------------------

    def propose_block(
        self,
        snapshot: Snapshot,
        tx_stream: Iterable[TransactionRecord],
        target_size: int,
    ) -> tuple[Block, Snapshot]:
        """Assemble a block of up to ``target_size`` mutually compatible transactions."""
        if target_size <= 0:
            raise ValueError("target size must be positive")
        t0 = time.perf_counter()
        rmap = ReservationMap(snapshot.values)
        draw = _drawer(tx_stream)
        count = AtomicWord(0)

        def worker() -> _WorkerTally:
            tally = _WorkerTally()
            admitted = tally.admitted
            run = self.run_transaction
            reserve = rmap.reserve
            while count.load() < target_size:
                tx = draw()
                if tx is None:
                    break
                tally.drawn += 1
                try:
                    deltas = run(snapshot, tx)
                except ProgramAbort:
                    tally.aborted += 1
                    continue
                tickets = []
                try:
                    for addr, d in deltas:
                        tickets.append(reserve(addr, d))
                except ConstraintViolation:
                    tally.conflicted += 1
                    for t in tickets:
                        t.state.rollback(t)
                    continue
                if count.fetch_add(1) >= target_size:
                    tally.over_capacity += 1
                    for t in tickets:
                        t.state.rollback(t)
                    break
                for t in tickets:
                    t.state.commit(t)
                admitted.append(tx)
            return tally

        tallies = self._fan_out([worker] * self.threads)
        stats = BlockStats(block_number=snapshot.block_number + 1)
        txs = []
        for t in tallies:
            txs.extend(t.admitted)
            stats.drawn += t.drawn
            stats.aborted += t.aborted
            stats.conflicted += t.conflicted
            stats.over_capacity += t.over_capacity
        stats.admitted = len(txs)
        t1 = time.perf_counter()
        stats.exec_seconds = t1 - t0
        block = Block(snapshot.block_number + 1, tuple(txs))
        block, new = self._finalize(snapshot, block, rmap, Mode.PROPOSE, stats)
        self.last_stats = stats
        return block, new

    # -- execution ------------------------------------------------------------

    def execute_block(self, snapshot: Snapshot, block: Block) -> Snapshot:
        """Apply a given block, or raise :class:`BlockInvalid` and change nothing.

        Roots carried by the block are checked against the recomputed ones.
        """
        return self.apply_block(snapshot, block)[1]

    def apply_block(self, snapshot: Snapshot, block: Block) -> tuple[Block, Snapshot]:
        """Like :meth:`execute_block`, also returning the block with its roots."""
        if block.block_number != snapshot.block_number + 1:
            raise BlockInvalid(
                f"block {block.block_number} does not follow {snapshot.block_number}"
            )
        t0 = time.perf_counter()
        rmap = ReservationMap(snapshot.values)
        txs = block.transactions
        draw = _drawer(txs)
        failure = AtomicWord(None)

        def worker() -> None:
            run = self.run_transaction
            reserve = rmap.reserve
            while failure.load() is None:
                tx = draw()
                if tx is None:
                    return
                try:
                    deltas = run(snapshot, tx)
                except ProgramAbort as e:
                    failure.compare_and_swap(None, BlockInvalid(f"transaction aborted: {e}"))
                    return
                try:
                    for addr, d in deltas:
                        t = reserve(addr, d)
                        t.state.commit(t)
                except ConstraintViolation as e:
                    failure.compare_and_swap(None, BlockInvalid(type(e).__name__, e.address))
                    return

        self._fan_out([worker] * self.threads)
        err = failure.load()
        if err is not None:
            raise err
        stats = BlockStats(
            block_number=block.block_number, drawn=len(txs), admitted=len(txs),
            exec_seconds=time.perf_counter() - t0,
        )
        expected = (block.state_root, block.modification_root, block.tx_root)
        out = self._finalize(snapshot, block.without_roots(), rmap, Mode.EXECUTE, stats,
                             expected=expected)
        self.last_stats = stats
        return out

    # -- finalize -------------------------------------------------------------

    def _finalize(
        self,
        snapshot: Snapshot,
        block: Block,
        rmap: ReservationMap,
        mode: Mode,
        stats: BlockStats,
        expected: tuple = (None, None, None),
    ) -> tuple[Block, Snapshot]:
        t0 = time.perf_counter()
        keys = rmap.touched()
        n = len(keys)
        results: list = [None] * n
        parts = max(1, min(self.threads, n))
        bounds = [n * i // parts for i in range(parts + 1)]

        def finalize_range(lo: int, hi: int) -> None:
            get = rmap.get
            for i in range(lo, hi):
                k = keys[i]
                v = get(k).finalize(mode)
                if v is UNCHANGED:
                    continue
                results[i] = (k, v, None if v is None else serialize_value(v))

        try:
            self._fan_out(
                [lambda lo=bounds[i], hi=bounds[i + 1]: finalize_range(lo, hi)
                 for i in range(parts)]
            )
        except ConstraintViolation as e:
            raise BlockInvalid(type(e).__name__, e.address) from e
        changes = [r for r in results if r is not None]
        rmap.reclaim()

        trie = snapshot.trie.copy()
        trie.update_sorted([(k, enc) for k, _, enc in changes])
        values = StateMap(snapshot.values, ((k, v) for k, v, _ in changes))
        mod = Trie(build([(k, b"") for k, _, _ in changes], 0, len(changes), 0))
        txt = tx_trie(block.transactions)
        roots = (trie.root_hash(self._pool), mod.root_hash(self._pool), txt.root_hash())
        for name, want, got in zip(("state", "modification", "transaction"), expected, roots):
            if want is not None and want != got:
                raise BlockInvalid(f"{name} root mismatch")
        block = block.with_roots(*roots)
        new = Snapshot(block.block_number, values, trie)
        stats.touched_keys = n
        stats.changed_keys = len(changes)
        t1 = time.perf_counter()
        stats.finalize_seconds = t1 - t0
        if self.log is not None:
            stats.nodes_logged = self.log.persist_block(block.block_number, block.encode(), trie)
            stats.persist_seconds = time.perf_counter() - t1
        return block, new

    def finalize_block(self, snapshot: Snapshot, block: Block, rmap: ReservationMap,
                       mode: Mode = Mode.EXECUTE) -> tuple[Block, Snapshot]:
        """Finalize a transaction phase driven by the caller through ``rmap``."""
        stats = BlockStats(block_number=block.block_number, admitted=len(block))
        out = self._finalize(snapshot, block, rmap, mode, stats)
        self.last_stats = stats
        return out

    # -- deterministic filtering -------------------------------------------

    def filter_block(self, snapshot: Snapshot, block: Block) -> tuple[Block, Snapshot]:
        """Drop every transaction in some key's conflict set; apply the rest.

        The result depends only on the snapshot and the transaction multiset.
        Aborting transactions are dropped as well.
        """
        txs = block.transactions
        outputs: list = [None] * len(txs)
        parts = max(1, min(self.threads, len(txs)))
        bounds = [len(txs) * i // parts for i in range(parts + 1)]

        def run_range(lo: int, hi: int) -> None:
            for i in range(lo, hi):
                try:
                    outputs[i] = self.run_transaction(snapshot, txs[i])
                except ProgramAbort:
                    outputs[i] = None

        self._fan_out(
            [lambda lo=bounds[i], hi=bounds[i + 1]: run_range(lo, hi) for i in range(parts)]
        )
        alive = {i for i, out in enumerate(outputs) if out is not None}
        while True:
            by_key: dict = defaultdict(list)
            for i in sorted(alive):
                for addr, d in outputs[i]:
                    by_key[addr].append((i, d))
            removed = set()
            for addr, writes in by_key.items():
                removed |= conflict_set(snapshot.values.get(addr), writes)
            if not removed:
                break
            alive -= removed
        kept = Block(block.block_number, tuple(txs[i] for i in sorted(alive)))
        return self.apply_block(snapshot, kept)


def conflict_set(snapshot: Optional[Value], writes: list) -> set:
    """Transactions to drop so that one key's remaining deltas resolve.

    ``writes`` holds ``(tx index, delta)`` pairs. Deletes never conflict.
    Kind clashes drop every non-delete writer; a disagreement on a string
    payload or integer base drops every writer; a nonnegativity failure drops
    every subtractor; an overflow drops every adder; a repeated hash drops its
    inserters; a size overrun drops every inserter.
    """
    typed = [(i, d) for i, d in writes if d.kind is not None]
    if not typed:
        return set()
    kinds = {d.kind for _, d in typed}
    if len(kinds) > 1 or (snapshot is not None and snapshot.kind not in kinds):
        return {i for i, _ in typed}
    (kind,) = kinds
    out: set = set()
    if kind == Kind.BYTESTRING:
        if len({d.payload for _, d in typed if type(d) is StringSet}) > 1:
            out = {i for i, _ in typed}
        return out
    if kind == Kind.NONNEG_INT64:
        ints = [(i, d) for i, d in typed if type(d) is Int64SetAdd]
        if len({d.base for _, d in ints}) > 1:
            return {i for i, _ in ints}
        x = ints[0][1].base
        adds = sum(d.delta for _, d in ints if d.delta > 0)
        subs = -sum(d.delta for _, d in ints if d.delta < 0)
        if (x >= 0 and x < subs) or (x < 0 and subs > 0):
            out |= {i for i, d in ints if d.delta < 0}
        if x + adds > INT64_MAX:
            out |= {i for i, d in ints if d.delta > 0}
        return out
    inserts = [(i, d) for i, d in typed if type(d) is SetInsert]
    present = snapshot.hashes if snapshot is not None else frozenset()
    seen = Counter(d.hash for _, d in inserts)
    for i, d in inserts:
        if seen[d.hash] > 1 or d.hash in present:
            out.add(i)
    n = len(snapshot.elements) if snapshot is not None else 0
    limit = snapshot.limit if snapshot is not None else 64
    if n + len(inserts) > limit:
        out |= {i for i, _ in inserts}
    return out


def _drawer(stream: Iterable[TransactionRecord]) -> Callable[[], Optional[TransactionRecord]]:
    """A thread-safe ``draw()`` returning the next transaction or None."""
    if isinstance(stream, (list, tuple)):
        items = stream
        ticket = itertools.count()
        n = len(items)

        def draw_seq() -> Optional[TransactionRecord]:
            i = next(ticket)  # atomic under the interpreter lock
            return items[i] if i < n else None

        return draw_seq
    it = iter(stream)
    lock = threading.Lock()

    def draw_iter() -> Optional[TransactionRecord]:
        with lock:
            return next(it, None)

    return draw_iter
