"""Payments workload and throughput harness.

Each payment is a wallet ``PAY`` between two distinct accounts chosen
uniformly at random, for a fixed amount. Per transaction the host reads six
addresses (sender key, token address, allowance, both balances, replay set)
and writes four (replay set, allowance, both balances).

A run sets up a funded genesis state once, then performs ``warmup`` plus
``blocks`` rounds. By default every round proposes the block after genesis
from the same genesis snapshot with a fresh batch of payments, so rounds are
independent trials; with ``chain`` each round builds on the previous one.
With persistence on, all rounds go to one log (independent trials then log
several blocks with the same number; replay follows the last one).
Timing covers proposal end to end: signature checks, execution, reservation,
finalize and all root computations, plus logging when persistence is on.
Workload generation and key setup are excluded. As with :mod:`timeit`, the
cyclic garbage collector is paused for the timed proposal.

The ``overdraft`` workload funds every account with a small balance and pays
more than half of it, so at most one payment per sender fits in a block.
"""

from __future__ import annotations

import csv
import gc
import io
import math
import os
import random
import shutil
import statistics
import tempfile
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from hashlib import sha256
from pathlib import Path
from typing import Iterable, Optional

from snapledger.block import TransactionRecord
from snapledger.contracts import Registry, Token, Wallet, contract_address, standard_registry
from snapledger.contracts.wallet import Keypair
from snapledger.engine import Engine, Snapshot
from snapledger.errors import BlockInvalid
from snapledger.persist import PersistLog
from snapledger.store import MAX_SET_LIMIT

WORKLOADS = ("payments", "overdraft")
EXPAND_REPLAY_SETS_UP_TO = 10_000
READS_PER_PAYMENT = 6
WRITES_PER_PAYMENT = 4


@dataclass
class WorkloadConfig:
    accounts: int = 10_000
    batch_size: int = 10_000
    threads: int = 1
    blocks: int = 3
    warmup: int = 1
    persist: bool = False
    verify: bool = False
    seed: int = 0
    workload: str = "payments"
    chain: bool = False
    amount: int = 1
    initial_balance: int = 10**9
    overdraft_balance: int = 10
    overdraft_amount: int = 6
    persist_dir: Optional[str] = None

    def __post_init__(self):
        if self.accounts < 2:
            raise ValueError("need at least two accounts")
        if self.batch_size < 1 or self.threads < 1 or self.blocks < 1 or self.warmup < 0:
            raise ValueError("batch size, threads and blocks must be positive")
        if self.workload not in WORKLOADS:
            raise ValueError(f"workload must be one of {WORKLOADS}")

    @property
    def expand_replay_sets(self) -> bool:
        return self.accounts <= EXPAND_REPLAY_SETS_UP_TO

    @property
    def payment_amount(self) -> int:
        return self.overdraft_amount if self.workload == "overdraft" else self.amount

    @property
    def balance(self) -> int:
        return self.overdraft_balance if self.workload == "overdraft" else self.initial_balance


@dataclass
class Population:
    """Accounts, keys and the funded genesis snapshot for one config."""

    registry: Registry
    token: Token
    wallet: Wallet
    accounts: list
    keys: list
    genesis: Snapshot
    setup_seconds: float = 0.0


def account_id(seed: int, i: int) -> bytes:
    return sha256(b"account" + seed.to_bytes(8, "big") + i.to_bytes(8, "big")).digest()


def key_seed(seed: int, i: int) -> bytes:
    return sha256(b"key" + seed.to_bytes(8, "big") + i.to_bytes(8, "big")).digest()


def make_population(cfg: WorkloadConfig) -> Population:
    t0 = time.perf_counter()
    reg = standard_registry()
    token: Token = reg[contract_address("token")]
    wallet: Wallet = reg[contract_address("wallet")]
    accounts = [account_id(cfg.seed, i) for i in range(cfg.accounts)]
    keys = [Keypair(key_seed(cfg.seed, i)) for i in range(cfg.accounts)]
    # the wallet spends through allowances; make them effectively unbounded
    allowance = 1 << 62
    values = token.genesis(
        {a: cfg.balance for a in accounts},
        {(a, wallet.address): allowance for a in accounts},
    )
    values.update(
        wallet.genesis(
            token.address,
            {a: k.public for a, k in zip(accounts, keys)},
            MAX_SET_LIMIT if cfg.expand_replay_sets else None,
        )
    )
    snap = Snapshot.genesis(values)
    snap.state_root  # hash the genesis trie during setup, not in the first block
    # The genesis state lives for the whole run and is never garbage. Keeping
    # it out of the cyclic collector stops full collections from rescanning
    # millions of trie nodes and values in the middle of timed blocks.
    gc.collect()
    gc.freeze()
    return Population(reg, token, wallet, accounts, keys, snap, time.perf_counter() - t0)


def draw_pairs(accounts: int, n: int, rng: random.Random) -> list[tuple[int, int]]:
    """``n`` (sender, receiver) index pairs, uniform over ordered distinct pairs."""
    out = []
    for _ in range(n):
        s = rng.randrange(accounts)
        r = rng.randrange(accounts - 1)
        if r >= s:
            r += 1
        out.append((s, r))
    return out


def generate_payments(
    cfg: WorkloadConfig,
    pop: Population,
    n: int,
    expiration: int,
    rng: random.Random,
    nonce_start: int = 0,
) -> list[TransactionRecord]:
    """``n`` signed payments between uniformly chosen distinct accounts."""
    accts, keys = pop.accounts, pop.keys
    amount = cfg.payment_amount
    pay = pop.wallet.payment
    out = [
        pay(keys[s], accts[s], accts[r], amount, nonce_start + j, expiration)
        for j, (s, r) in enumerate(draw_pairs(cfg.accounts, n, rng))
    ]
    for tx in out:
        tx.tx_hash  # warm the cached encoding and hash outside the timed region
    return out


def expected_account_collisions(n_tx: int, accounts: int) -> float:
    """Expected sum over accounts of C(touches, 2) for ``n_tx`` uniform payments.

    Each payment touches a given account with probability 2/N, so each of the
    C(n, 2) transaction pairs shares that account with probability 4/N^2.
    """
    return math.comb(n_tx, 2) * 4 / accounts


def count_collisions(pairs: Iterable[tuple]) -> int:
    """Sum over accounts of C(touches, 2) for (sender, receiver) pairs."""
    counts = Counter(a for pair in pairs for a in pair)
    return sum(c * (c - 1) // 2 for c in counts.values())


def observed_account_collisions(txs: Iterable[TransactionRecord]) -> int:
    return count_collisions((tx.sender, tx.input[:32]) for tx in txs)


# -- results ------------------------------------------------------------------


@dataclass
class RoundResult:
    accounts: int
    batch_size: int
    threads: int
    workload: str
    persist: bool
    round: int
    drawn: int
    admitted: int
    dropped: int
    exec_seconds: float
    finalize_seconds: float
    persist_seconds: float
    seconds: float
    tps: float
    touched_keys: int
    nodes_logged: int
    verified: Optional[bool]
    state_root: str


@dataclass
class BenchReport:
    config: WorkloadConfig
    rounds: list = field(default_factory=list)
    setup_seconds: float = 0.0
    tx_bytes: float = 0.0
    verify_failures: int = 0

    @property
    def tps(self) -> list[float]:
        return [r.tps for r in self.rounds]

    @property
    def mean_tps(self) -> float:
        return statistics.fmean(self.tps) if self.rounds else 0.0

    @property
    def std_tps(self) -> float:
        return statistics.stdev(self.tps) if len(self.rounds) > 1 else 0.0

    @property
    def ok(self) -> bool:
        return self.verify_failures == 0

    def summary(self) -> dict:
        c = self.config
        return {
            "accounts": c.accounts,
            "batch_size": c.batch_size,
            "threads": c.threads,
            "workload": c.workload,
            "persist": c.persist,
            "rounds": len(self.rounds),
            "tps_mean": self.mean_tps,
            "tps_std": self.std_tps,
            "admitted_mean": statistics.fmean(r.admitted for r in self.rounds) if self.rounds else 0,
            "tx_bytes": self.tx_bytes,
            "reads_per_tx": READS_PER_PAYMENT,
            "writes_per_tx": WRITES_PER_PAYMENT,
            "verify_failures": self.verify_failures,
        }


def _timed_propose(engine: Engine, base: Snapshot, txs: list, target: int):
    # like timeit, keep the cyclic collector out of the measurement; the
    # block's garbage is acyclic and reference counting still frees it
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        return engine.propose_block(base, txs, target)
    finally:
        if was_enabled:
            gc.enable()


def run_benchmark(cfg: WorkloadConfig, population: Optional[Population] = None) -> BenchReport:
    pop = population if population is not None else make_population(cfg)
    report = BenchReport(cfg, setup_seconds=pop.setup_seconds)
    rng = random.Random(cfg.seed)
    log_root = None
    if cfg.persist:
        log_root = Path(cfg.persist_dir) if cfg.persist_dir else Path(tempfile.mkdtemp(prefix="bench-log-"))
    engine = Engine(pop.registry, cfg.threads)
    if log_root is not None:
        # one log per run; the base state is recorded untimed so that each
        # timed block only writes the nodes it changes
        engine.log = PersistLog(log_root)
        engine.log.persist_block(pop.genesis.block_number, b"", pop.genesis.trie)
    verifier = Engine(pop.registry, cfg.threads) if cfg.verify else None
    base = pop.genesis
    nonce = 0
    sizes = []
    try:
        for i in range(cfg.warmup + cfg.blocks):
            target = base.block_number + 1
            txs = generate_payments(cfg, pop, cfg.batch_size, target, rng, nonce)
            nonce += len(txs)
            sizes.append(statistics.fmean(len(t.encoded) for t in txs))
            block, new = _timed_propose(engine, base, txs, cfg.batch_size)
            st = engine.last_stats
            verified = None
            if verifier is not None:
                try:
                    again = verifier.execute_block(base, block)
                    verified = again.state_root == new.state_root
                except BlockInvalid:
                    verified = False
                if not verified:
                    report.verify_failures += 1
            if cfg.chain:
                base = new
            if i < cfg.warmup:
                continue
            secs = st.seconds
            report.rounds.append(
                RoundResult(
                    cfg.accounts, cfg.batch_size, cfg.threads, cfg.workload, cfg.persist,
                    i - cfg.warmup, st.drawn, st.admitted, st.dropped, st.exec_seconds,
                    st.finalize_seconds, st.persist_seconds, secs,
                    st.admitted / secs if secs else 0.0, st.touched_keys, st.nodes_logged,
                    verified, new.state_root.hex(),
                )
            )
    finally:
        engine.close()
        if verifier is not None:
            verifier.close()
        if engine.log is not None:
            engine.log.close()
        if log_root is not None and cfg.persist_dir is None:
            shutil.rmtree(log_root, ignore_errors=True)
    report.tx_bytes = statistics.fmean(sizes) if sizes else 0.0
    return report


# -- output -------------------------------------------------------------------

ROUND_FIELDS = [f.name for f in fields(RoundResult)]


def write_csv(reports: Iterable[BenchReport], path: str | os.PathLike | None = None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ROUND_FIELDS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        for r in rep.rounds:
            w.writerow(asdict(r))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_csv(text: str) -> list[RoundResult]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(
            RoundResult(
                accounts=int(row["accounts"]),
                batch_size=int(row["batch_size"]),
                threads=int(row["threads"]),
                workload=row["workload"],
                persist=row["persist"] == "True",
                round=int(row["round"]),
                drawn=int(row["drawn"]),
                admitted=int(row["admitted"]),
                dropped=int(row["dropped"]),
                exec_seconds=float(row["exec_seconds"]),
                finalize_seconds=float(row["finalize_seconds"]),
                persist_seconds=float(row["persist_seconds"]),
                seconds=float(row["seconds"]),
                tps=float(row["tps"]),
                touched_keys=int(row["touched_keys"]),
                nodes_logged=int(row["nodes_logged"]),
                verified=None if row["verified"] == "" else row["verified"] == "True",
                state_root=row["state_root"],
            )
        )
    return out


def aggregate(rows: Iterable[RoundResult]) -> list[dict]:
    """Mean and standard deviation of tx/s per (accounts, batch, threads), with speedups."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r.accounts, r.batch_size, r.threads), []).append(r.tps)
    out = []
    for (acc, batch, threads), tps in sorted(groups.items()):
        mean = statistics.fmean(tps)
        base = groups.get((acc, batch, 1))
        out.append(
            {
                "accounts": acc,
                "batch_size": batch,
                "threads": threads,
                "rounds": len(tps),
                "tps_mean": mean,
                "tps_std": statistics.stdev(tps) if len(tps) > 1 else 0.0,
                "speedup": mean / statistics.fmean(base) if base else None,
            }
        )
    return out


def format_table(rows: Iterable[RoundResult]) -> str:
    agg = aggregate(rows)
    head = f"{'accounts':>10} {'batch':>8} {'threads':>7} {'rounds':>6} {'tx/s':>10} {'std':>9} {'speedup':>7}"
    lines = [head, "-" * len(head)]
    for a in agg:
        sp = "" if a["speedup"] is None else f"{a['speedup']:.2f}x"
        lines.append(
            f"{a['accounts']:>10} {a['batch_size']:>8} {a['threads']:>7} {a['rounds']:>6} "
            f"{a['tps_mean']:>10.1f} {a['tps_std']:>9.1f} {sp:>7}"
        )
    return "\n".join(lines)
