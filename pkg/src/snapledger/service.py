"""HTTP front end for a :class:`~snapledger.node.LedgerNode`.

Binary fields travel as lowercase hex. Endpoints::

    GET  /status                 head height, roots, mempool size, last block stats
    POST /transactions           queue a transaction (fields or full encoding)
    POST /blocks/propose         build the next block from the mempool
    POST /blocks/execute         apply a block encoded elsewhere
    GET  /blocks/{number}        a block of the local chain
    GET  /state/{address}        the value stored at a 64-byte address
    POST /bench                  run the payments benchmark in-process
"""

from __future__ import annotations

from dataclasses import asdict
from typing import Literal, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field, field_validator

from snapledger import __version__
from snapledger.bench import WORKLOADS, WorkloadConfig, run_benchmark
from snapledger.block import Block, TransactionRecord
from snapledger.errors import BlockInvalid
from snapledger.node import LedgerNode
from snapledger.store import ADDRESS_LEN, Bytestring, NonnegInt64, OrderedSet, Value


def _hex(b: Optional[bytes]) -> Optional[str]:
    return None if b is None else b.hex()


def _unhex(s: str, what: str, length: Optional[int] = None) -> bytes:
    try:
        b = bytes.fromhex(s)
    except ValueError:
        raise HTTPException(422, f"{what} is not hex")
    if length is not None and len(b) != length:
        raise HTTPException(422, f"{what} must be {length} bytes")
    return b


# -- models -----------------------------------------------------------------


class TransactionIn(BaseModel):
    """Either ``encoded`` alone, or the individual fields."""

    encoded: Optional[str] = None
    contract: Optional[str] = None
    method: int = Field(0, ge=0, le=255)
    input: str = ""
    sender: str = "00" * 32
    expiration: int = Field(0, ge=0)
    signature: str = "00" * 64

    def to_record(self) -> TransactionRecord:
        try:
            if self.encoded is not None:
                return TransactionRecord.decode(_unhex(self.encoded, "encoded"))
            if self.contract is None:
                raise HTTPException(422, "need encoded or contract")
            return TransactionRecord(
                _unhex(self.contract, "contract", 32),
                self.method,
                _unhex(self.input, "input"),
                _unhex(self.sender, "sender", 32),
                self.expiration,
                _unhex(self.signature, "signature", 64),
            )
        except (ValueError, IndexError) as e:
            raise HTTPException(422, f"bad transaction: {e}")


class TransactionOut(BaseModel):
    tx_hash: str
    contract: str
    method: int
    sender: str
    expiration: int
    input: str
    encoded: str

    @classmethod
    def of(cls, tx: TransactionRecord) -> "TransactionOut":
        return cls(
            tx_hash=tx.tx_hash.hex(), contract=tx.contract.hex(), method=tx.method,
            sender=tx.sender.hex(), expiration=tx.expiration, input=tx.input.hex(),
            encoded=tx.encoded.hex(),
        )


class Submitted(BaseModel):
    tx_hash: str
    mempool: int


class ProposeIn(BaseModel):
    max_transactions: int = Field(10_000, ge=1)


class ExecuteIn(BaseModel):
    encoded: str


class BlockOut(BaseModel):
    block_number: int
    block_hash: str
    state_root: Optional[str]
    modification_root: Optional[str]
    tx_root: Optional[str]
    transactions: list[TransactionOut]
    encoded: str

    @classmethod
    def of(cls, block: Block) -> "BlockOut":
        return cls(
            block_number=block.block_number, block_hash=block.block_hash.hex(),
            state_root=_hex(block.state_root), modification_root=_hex(block.modification_root),
            tx_root=_hex(block.tx_root),
            transactions=[TransactionOut.of(t) for t in block.transactions],
            encoded=block.encode().hex(),
        )


class ValueOut(BaseModel):
    address: str
    kind: Optional[Literal["bytestring", "nonneg_int64", "ordered_set"]]
    payload: Optional[str] = None
    value: Optional[int] = None
    elements: Optional[list[tuple[int, str]]] = None
    limit: Optional[int] = None

    @classmethod
    def of(cls, address: bytes, v: Optional[Value]) -> "ValueOut":
        a = address.hex()
        if v is None:
            return cls(address=a, kind=None)
        if isinstance(v, Bytestring):
            return cls(address=a, kind="bytestring", payload=v.payload.hex())
        if isinstance(v, NonnegInt64):
            return cls(address=a, kind="nonneg_int64", value=v.value)
        assert isinstance(v, OrderedSet)
        return cls(
            address=a, kind="ordered_set", limit=v.limit,
            elements=[(e.tag, e.hash.hex()) for e in v.elements],
        )


class Status(BaseModel):
    version: str
    height: int
    state_root: str
    keys: int
    mempool: int
    threads: int
    persist: bool
    last_block: Optional[dict] = None


class BenchIn(BaseModel):
    accounts: int = Field(1000, ge=2)
    batch_size: int = Field(1000, ge=1)
    threads: int = Field(1, ge=1)
    blocks: int = Field(3, ge=1)
    warmup: int = Field(1, ge=0)
    seed: int = 0
    persist: bool = False
    verify: bool = False
    workload: str = "payments"

    @field_validator("workload")
    @classmethod
    def _known(cls, v: str) -> str:
        if v not in WORKLOADS:
            raise ValueError(f"workload must be one of {WORKLOADS}")
        return v


class BenchOut(BaseModel):
    summary: dict
    rounds: list[dict]


# -- app --------------------------------------------------------------------


def create_app(node: Optional[LedgerNode] = None) -> FastAPI:
    node = node if node is not None else LedgerNode()
    app = FastAPI(title="snapledger", version=__version__)
    app.state.node = node

    @app.get("/status", response_model=Status)
    def status() -> Status:
        st = node.last_stats
        return Status(
            version=__version__, height=node.height, state_root=node.head.state_root.hex(),
            keys=len(node.head), mempool=len(node.mempool), threads=node.engine.threads,
            persist=node.engine.log is not None,
            last_block=None if st is None else asdict(st),
        )

    @app.post("/transactions", response_model=Submitted)
    def submit(tx: TransactionIn) -> Submitted:
        h = node.submit(tx.to_record())
        return Submitted(tx_hash=h.hex(), mempool=len(node.mempool))

    @app.post("/blocks/propose", response_model=BlockOut)
    def propose(req: ProposeIn) -> BlockOut:
        return BlockOut.of(node.propose(req.max_transactions))

    @app.post("/blocks/execute", response_model=BlockOut)
    def execute(req: ExecuteIn) -> BlockOut:
        try:
            block = Block.decode(_unhex(req.encoded, "encoded"))
        except (ValueError, IndexError) as e:
            raise HTTPException(422, f"bad block: {e}")
        try:
            node.execute(block)
        except BlockInvalid as e:
            raise HTTPException(409, f"block rejected: {e}")
        return BlockOut.of(node.block(block.block_number))

    @app.get("/blocks/{number}", response_model=BlockOut)
    def get_block(number: int) -> BlockOut:
        block = node.block(number)
        if block is None:
            raise HTTPException(404, f"no block {number}")
        return BlockOut.of(block)

    @app.get("/state/{address}", response_model=ValueOut)
    def get_state(address: str) -> ValueOut:
        a = _unhex(address, "address", ADDRESS_LEN)
        return ValueOut.of(a, node.get(a))

    @app.post("/bench", response_model=BenchOut)
    def bench(req: BenchIn) -> BenchOut:
        report = run_benchmark(WorkloadConfig(**req.model_dump()))
        return BenchOut(summary=report.summary(), rounds=[asdict(r) for r in report.rounds])

    return app
