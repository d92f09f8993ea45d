"""A single ledger replica: head snapshot, mempool, block history, optional log.

The node is what the HTTP service wraps. It keeps the chain linear: every
proposed or executed block must follow the current head. With a log
directory the node records each block and, when restarted on the same
directory, resumes from the replayed state.
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Mapping, Optional

from snapledger.block import Block, TransactionRecord
from snapledger.contracts import Registry, standard_registry
from snapledger.engine import BlockStats, Engine, Snapshot
from snapledger.persist import BLOCKS_FILE, PersistLog, replay_log
from snapledger.store import Value, deserialize_value
from snapledger.trie import iter_leaves


class LedgerNode:
    def __init__(
        self,
        registry: Optional[Registry] = None,
        genesis: Optional[Mapping[bytes, Value]] = None,
        threads: int = 1,
        log_dir: Optional[str] = None,
        fsync: bool = False,
    ):
        self.registry = registry if registry is not None else standard_registry()
        self.blocks: dict[int, Block] = {}
        self.mempool: dict[bytes, TransactionRecord] = {}
        self.last_stats: Optional[BlockStats] = None
        self._lock = threading.Lock()
        log = None
        resumed = False
        if log_dir is not None:
            resumed = (Path(log_dir) / BLOCKS_FILE).exists()
            if resumed:
                self.head = self._resume(log_dir)
            log = PersistLog(log_dir, fsync=fsync)
        if not resumed:
            self.head = Snapshot.genesis(genesis or {})
            if log is not None:
                log.persist_block(self.head.block_number, b"", self.head.trie)
        self.engine = Engine(self.registry, threads, log)

    def _resume(self, log_dir: str) -> Snapshot:
        rep = replay_log(log_dir)
        values = {leaf.key: deserialize_value(leaf.payload) for leaf in iter_leaves(rep.state.root)}
        for rec in rep.blocks:
            if rec.block_bytes:
                blk = Block.decode(rec.block_bytes)
                self.blocks[blk.block_number] = blk
        return Snapshot(rep.block_number, values, rep.state)

    def close(self) -> None:
        self.engine.close()
        if self.engine.log is not None:
            self.engine.log.close()

    # -- queries --------------------------------------------------------------

    @property
    def height(self) -> int:
        return self.head.block_number

    def get(self, address: bytes) -> Optional[Value]:
        return self.head.get(address)

    def block(self, number: int) -> Optional[Block]:
        return self.blocks.get(number)

    # -- mutation -------------------------------------------------------------

    def submit(self, tx: TransactionRecord) -> bytes:
        with self._lock:
            self.mempool.setdefault(tx.tx_hash, tx)
        return tx.tx_hash

    def propose(self, max_transactions: int = 10_000) -> Block:
        """Build the next block from the mempool and make it the new head.

        Included transactions leave the mempool, and so do those that can no
        longer be valid because their expiration has passed. Transactions that
        were skipped for conflicts stay queued for a later block.
        """
        with self._lock:
            pending = list(self.mempool.values())
            block, new = self.engine.propose_block(self.head, pending, max_transactions)
            self._advance(block, new)
            return block

    def execute(self, block: Block) -> Snapshot:
        """Apply a block built elsewhere; raises ``BlockInvalid`` and keeps the head."""
        with self._lock:
            block, new = self.engine.apply_block(self.head, block)
            self._advance(block, new)
            return new

    def _advance(self, block: Block, new: Snapshot) -> None:
        self.head = new
        self.blocks[block.block_number] = block
        self.last_stats = self.engine.last_stats
        for tx in block.transactions:
            self.mempool.pop(tx.tx_hash, None)
        n = new.block_number + 1
        for h in [h for h, tx in self.mempool.items() if tx.expiration and tx.expiration < n]:
            del self.mempool[h]
