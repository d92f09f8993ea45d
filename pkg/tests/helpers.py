"""Random instance generators and brute-force oracles shared by the tests."""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass
from hashlib import sha256

from snapledger.block import TransactionRecord
from snapledger.contracts import Token, contract_address, standard_registry
from snapledger.contracts import auction as auction_mod
from snapledger.contracts import sequencer as sequencer_mod
from snapledger.contracts.script import RUN, script_input, script_key
from snapledger.engine import Engine, Snapshot
from snapledger.errors import ConstraintViolation
from snapledger.rc import UNCHANGED, Mode, ReservationMap
from snapledger.store import (
    DELETE,
    INT64_MAX,
    MAX_SET_LIMIT,
    Bytestring,
    Delete,
    Int64SetAdd,
    NonnegInt64,
    OrderedSet,
    SetClear,
    SetElement,
    SetInsert,
    SetLimitIncrease,
    StringSet,
    make_address,
    merge_key,
)

SCRIPT = contract_address("script")


def h(i: int) -> bytes:
    return sha256(b"h" + i.to_bytes(4, "big")).digest()


def outcome(snapshot, deltas):
    """merge_key result, or the name of the constraint it raised."""
    try:
        return merge_key(snapshot, deltas)
    except ConstraintViolation as e:
        return type(e).__name__


# -- random store instances ----------------------------------------------------


def random_int_instance(rng: random.Random):
    big = rng.random() < 0.1
    if rng.random() < 0.2:
        snap = None
        x = rng.choice([0, 5, -5]) if not big else INT64_MAX - 3
    else:
        x = rng.randint(-3, 20) if not big else INT64_MAX - rng.randint(0, 5)
        snap = NonnegInt64(x)
    deltas = []
    for _ in range(rng.randint(1, 7)):
        r = rng.random()
        if r < 0.05:
            deltas.append(DELETE)
        elif r < 0.08:
            deltas.append(StringSet(b"x"))
        else:
            base = x if rng.random() < 0.9 else x + 1 if x < INT64_MAX else x - 1
            deltas.append(Int64SetAdd(base, rng.randint(-8, 8)))
    return snap, deltas


def random_string_instance(rng: random.Random):
    snap = None if rng.random() < 0.3 else Bytestring(rng.choice([b"", b"a", b"b"]))
    deltas = []
    for _ in range(rng.randint(1, 6)):
        r = rng.random()
        if r < 0.1:
            deltas.append(DELETE)
        elif r < 0.13:
            deltas.append(SetClear(1))
        else:
            deltas.append(StringSet(rng.choice([b"a", b"a", b"a", b"b"])))
    return snap, deltas


def random_set(rng: random.Random, pool: int = 12, max_len: int = 6) -> OrderedSet:
    limit = 64 if rng.random() < 0.8 else rng.choice([64, 65, 100, MAX_SET_LIMIT])
    n = rng.randint(0, max_len)
    if rng.random() < 0.15:
        n = limit - rng.randint(0, 2)
        pool = max(pool, n + 10)
    idx = rng.sample(range(pool), n)
    return OrderedSet.of([(rng.randint(0, 9), h(i)) for i in idx], limit)


def random_set_instance(rng: random.Random):
    snap = None if rng.random() < 0.2 else random_set(rng)
    pool = max(12, (len(snap) + 10) if snap is not None else 12)
    deltas = []
    for _ in range(rng.randint(1, 8)):
        r = rng.random()
        if r < 0.55:
            deltas.append(SetInsert(rng.randint(0, 9), h(rng.randrange(pool))))
        elif r < 0.75:
            deltas.append(SetClear(rng.randint(0, 10)))
        elif r < 0.88:
            deltas.append(SetLimitIncrease(rng.choice([0, 1, 7, 40000])))
        elif r < 0.95:
            deltas.append(DELETE)
        else:
            deltas.append(Int64SetAdd(0, 1))
    return snap, deltas


GENERATORS = {
    "nonneg_int64": random_int_instance,
    "bytestring": random_string_instance,
    "ordered_set": random_set_instance,
}


def set_oracle(snapshot: OrderedSet | None, deltas) -> object:
    """Reference set semantics written as literally as possible.

    Returns ``NotImplemented`` for instances without set deltas.
    """
    foreign = any(not isinstance(d, (SetInsert, SetClear, SetLimitIncrease, Delete)) for d in deltas)
    if foreign:
        if isinstance(snapshot, OrderedSet) or any(
            isinstance(d, (SetInsert, SetClear, SetLimitIncrease)) for d in deltas
        ):
            return "TypeConflict"
        return NotImplemented
    if snapshot is not None and not isinstance(snapshot, OrderedSet):
        return "TypeConflict"
    if all(isinstance(d, Delete) for d in deltas):
        return None
    base = snapshot if snapshot is not None else OrderedSet()
    elems = list(base.elements)
    seen = {e.hash for e in elems}
    inserts = [d for d in deltas if isinstance(d, SetInsert)]
    for d in inserts:
        if d.hash in seen:
            return "DuplicateHash"
        seen.add(d.hash)
    if len(base.elements) + len(inserts) > base.limit:
        return "SizeViolation"
    for d in inserts:
        elems.append(SetElement(d.tag, d.hash))
    elems.sort()
    clears = [d.threshold for d in deltas if isinstance(d, SetClear)]
    if clears:
        t = max(clears)
        elems = [e for e in elems if e.tag >= t]
    limit = base.limit
    for d in deltas:
        if isinstance(d, SetLimitIncrease):
            limit = min(MAX_SET_LIMIT, limit + d.amount)
    if any(isinstance(d, Delete) for d in deltas):
        return None
    return OrderedSet(tuple(elems), limit)


# -- script transactions -------------------------------------------------------

KEY_LABELS = ["k0", "k1", "k2", "k3"]


def address_of(label: str) -> bytes:
    return SCRIPT + script_key(label)


def script_tx(ops: list, nonce: int = 0) -> TransactionRecord:
    # the nonce lives in the sender field so that equal op lists stay distinct
    sender = sha256(b"sender" + nonce.to_bytes(8, "big")).digest()
    return TransactionRecord(SCRIPT, RUN, script_input(ops), sender)


def random_script_snapshot(rng: random.Random, labels=KEY_LABELS) -> dict:
    values = {}
    for lab in labels:
        r = rng.random()
        if r < 0.25:
            continue
        if r < 0.5:
            values[address_of(lab)] = NonnegInt64(rng.randint(0, 12))
        elif r < 0.7:
            values[address_of(lab)] = Bytestring(rng.choice([b"a", b"b"]))
        else:
            values[address_of(lab)] = random_set(rng, pool=10, max_len=3)
    return values


def random_op(rng: random.Random, values: dict, labels=KEY_LABELS) -> tuple[list, object]:
    """One script op and the delta it emits."""
    lab = rng.choice(labels)
    cur = values.get(address_of(lab))
    r = rng.random()
    if r < 0.35:
        x = cur.value if isinstance(cur, NonnegInt64) and rng.random() < 0.85 else rng.randint(0, 12)
        d = rng.randint(-8, 8)
        return ["int64_set_add", lab, x, d], Int64SetAdd(x, d)
    if r < 0.5:
        p = rng.choice([b"a", b"a", b"b"])
        return ["string_set", lab, p.hex()], StringSet(p)
    if r < 0.75:
        t, hh = rng.randint(0, 9), h(rng.randrange(10))
        return ["set_insert", lab, t, hh.hex()], SetInsert(t, hh)
    if r < 0.85:
        t = rng.randint(0, 10)
        return ["set_clear", lab, t], SetClear(t)
    if r < 0.92:
        a = rng.choice([1, 5])
        return ["set_limit_increase", lab, a], SetLimitIncrease(a)
    return ["delete", lab], DELETE


def random_script_block(rng: random.Random, values: dict, max_txs: int = 6, labels=KEY_LABELS):
    """Transactions plus the per-address delta lists they emit."""
    txs = []
    per_key: dict[bytes, list] = {}
    for i in range(rng.randint(0, max_txs)):
        ops = []
        for _ in range(rng.randint(1, 3)):
            op, d = random_op(rng, values, labels)
            ops.append(op)
            per_key.setdefault(address_of(op[1]), []).append(d)
        txs.append(script_tx(ops, rng.getrandbits(60)))
    return txs, per_key


def block_oracle(values: dict, per_key: dict):
    """Expected post-state, or ``None`` if some key cannot resolve."""
    out = dict(values)
    for addr, deltas in per_key.items():
        try:
            v = merge_key(values.get(addr), deltas)
        except ConstraintViolation:
            return None
        if v is None:
            out.pop(addr, None)
        else:
            out[addr] = v
    return out


def registry():
    return standard_registry()


# -- a funded world for the contract tests -----------------------------------


def user(i: int) -> bytes:
    return sha256(b"user" + i.to_bytes(8, "big")).digest()


def call_tx(contract: bytes, method: int, data: bytes, sender: bytes, expiration: int = 0):
    return TransactionRecord(contract, method, data, sender, expiration)


@dataclass
class World:
    """Registry plus a genesis where users can pay the auction and sequencer."""

    registry: object
    token: Token
    auction: bytes
    sequencer: bytes
    users: list
    snap: Snapshot

    def step(self, engine: Engine, txs, target: int = 10_000):
        block, self.snap = engine.propose_block(self.snap, txs, target)
        return block

    def balance(self, account: bytes) -> int:
        return self.token.balance_of(self.snap.values, account)

    def holders(self) -> list:
        return [*self.users, SCRIPT, self.auction, self.sequencer]

    def supply(self) -> int:
        """Balances of every possible holder plus what is left to mint."""
        vals = self.snap.values
        return self.token.unminted_of(vals) + sum(self.token.balance_of(vals, a) for a in self.holders())


def make_world(n_users: int = 8, balance: int = 1000, unminted: int = 10**6) -> World:
    reg = registry()
    token: Token = reg[contract_address("token")]
    auction = contract_address("auction")
    sequencer = contract_address("sequencer")
    users = [user(i) for i in range(n_users)]
    allowances = {(u, s): 1 << 40 for u in users for s in (auction, sequencer)}
    values = token.genesis(
        {**{u: balance for u in users}, SCRIPT: balance}, allowances, unminted, minter=SCRIPT
    )
    for c, k in ((auction, auction_mod.TOKEN_KEY), (sequencer, sequencer_mod.TOKEN_KEY)):
        values[make_address(c, k)] = Bytestring(token.address)
    return World(reg, token, auction, sequencer, users, Snapshot.genesis(values))


# -- reservation stress ----------------------------------------------------------


def stress(threads: int, ops_per_thread: int, keys: int, seed: int):
    """Random reserve/rollback/commit from many threads; returns map, snapshots, commits."""
    rng0 = random.Random(seed)
    snapshots = {}
    for i in range(keys):
        addr = i.to_bytes(64, "big")
        k = i % 4
        if k == 0:
            snapshots[addr] = NonnegInt64(rng0.randint(0, 200))
        elif k == 1:
            snapshots[addr] = Bytestring(b"a")
        elif k == 2:
            snapshots[addr] = OrderedSet.of([(0, h(1_000_000 + i))], 64)
        # k == 3: absent, any kind may claim it
    addrs = [i.to_bytes(64, "big") for i in range(keys)]
    rmap = ReservationMap(snapshots)
    committed = [[] for _ in range(threads)]
    violations = []
    stop = threading.Event()

    def random_delta(rng, addr):
        snap = snapshots.get(addr)
        r = rng.random()
        if r < 0.03:
            return DELETE
        if isinstance(snap, NonnegInt64) or (snap is None and r < 0.4):
            base = snap.value if snap is not None else 50
            if rng.random() < 0.05:
                base += 1
            return Int64SetAdd(base, rng.randint(-20, 12))
        if isinstance(snap, Bytestring) or (snap is None and r < 0.6):
            return StringSet(rng.choice([b"a", b"a", b"b"]))
        r = rng.random()
        if r < 0.75:
            return SetInsert(rng.randint(0, 20), h(rng.randrange(300)))
        if r < 0.9:
            return SetClear(rng.randint(0, 10))
        return SetLimitIncrease(rng.randint(0, 3))

    def worker(tid: int):
        rng = random.Random(seed * 1000 + tid)
        pending = []
        mine = committed[tid]
        for _ in range(ops_per_thread):
            if pending and rng.random() < 0.4:
                t = pending.pop(rng.randrange(len(pending)))
                if rng.random() < 0.5:
                    t.state.commit(t)
                    mine.append((t.state.address, t.delta))
                else:
                    t.state.rollback(t)
                continue
            addr = rng.choice(addrs)
            try:
                pending.append(rmap.reserve(addr, random_delta(rng, addr)))
            except Exception as e:
                if type(e).__name__ not in {
                    "ParameterMismatch", "NonnegativityViolation", "DuplicateHash", "SetFull",
                    "Overflow", "TypeConflict",
                }:
                    violations.append(repr(e))
        for t in pending:
            t.state.rollback(t)

    def monitor():
        while not stop.is_set():
            for st_ in list(rmap.states()):
                # sample between two reads of the parameter record so the base
                # and the running subtraction total belong to the same epoch
                p1 = st_.params
                sub = st_.total_sub
                if p1 is None or st_.params is not p1:
                    continue
                if isinstance(p1.payload, int) and p1.payload >= 0 and sub > p1.payload:
                    violations.append(f"total_sub {sub} > base {p1.payload}")

    ts = [threading.Thread(target=worker, args=(i,)) for i in range(threads)]
    mon = threading.Thread(target=monitor)
    mon.start()
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    stop.set()
    mon.join()
    return rmap, snapshots, committed, violations


def check_stress(rmap, snapshots, committed) -> int:
    per_key = {}
    for lst in committed:
        for addr, d in lst:
            per_key.setdefault(addr, []).append(d)
    mismatches = 0
    for st_ in rmap.states():
        deltas = per_key.get(st_.address, [])
        want = outcome(snapshots.get(st_.address), deltas)
        got = st_.finalize(Mode.PROPOSE)
        if got is UNCHANGED:
            got = snapshots.get(st_.address)
        if got != want:
            mismatches += 1
        assert st_.occupied_slots == st_.live_inserts
    return mismatches
