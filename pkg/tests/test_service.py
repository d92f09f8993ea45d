import pytest
from fastapi.testclient import TestClient

from snapledger.bench import WorkloadConfig, make_population
from snapledger.contracts import contract_address
from snapledger.contracts.script import RUN, script_input, script_key
from snapledger.node import LedgerNode
from snapledger.service import create_app

SCRIPT = contract_address("script")


def script_body(ops, sender="11" * 32):
    return {"contract": SCRIPT.hex(), "method": RUN, "input": script_input(ops).hex(),
            "sender": sender}


@pytest.fixture
def client():
    node = LedgerNode()
    with TestClient(create_app(node)) as c:
        yield c
    node.close()


def addr(label: str) -> str:
    return (SCRIPT + script_key(label)).hex()


def test_status_and_empty_state(client):
    st = client.get("/status").json()
    assert st["height"] == 0 and st["mempool"] == 0 and st["persist"] is False
    v = client.get(f"/state/{addr('x')}").json()
    assert v["kind"] is None


def test_submit_propose_read(client):
    r = client.post("/transactions", json=script_body([["int64_add", "x", 5]]))
    assert r.status_code == 200 and r.json()["mempool"] == 1
    # submitting the same transaction again does not queue it twice
    assert client.post("/transactions", json=script_body([["int64_add", "x", 5]])).json()["mempool"] == 1
    blk = client.post("/blocks/propose", json={"max_transactions": 10}).json()
    assert blk["block_number"] == 1 and len(blk["transactions"]) == 1
    assert client.get(f"/state/{addr('x')}").json() == {
        "address": addr("x"), "kind": "nonneg_int64", "payload": None, "value": 5,
        "elements": None, "limit": None,
    }
    assert client.get("/blocks/1").json()["state_root"] == blk["state_root"]
    st = client.get("/status").json()
    assert st["height"] == 1 and st["mempool"] == 0 and st["last_block"]["admitted"] == 1


def test_set_values_render(client):
    client.post("/transactions", json=script_body([["set_insert", "s", 3, "ab" * 32]]))
    client.post("/blocks/propose", json={})
    v = client.get(f"/state/{addr('s')}").json()
    assert v["kind"] == "ordered_set" and v["elements"] == [[3, "ab" * 32]] and v["limit"] == 64


def test_bad_input_is_rejected(client):
    assert client.get("/state/zz").status_code == 422
    assert client.get("/state/" + "00" * 10).status_code == 422
    assert client.post("/transactions", json={"encoded": "00"}).status_code == 422
    assert client.post("/transactions", json={"method": 1}).status_code == 422
    assert client.get("/blocks/7").status_code == 404
    assert client.post("/blocks/execute", json={"encoded": "xyz"}).status_code == 422


def test_blocks_move_between_nodes(client):
    client.post("/transactions", json=script_body([["int64_add", "x", 2]]))
    blk = client.post("/blocks/propose", json={}).json()
    other = LedgerNode()
    with TestClient(create_app(other)) as c2:
        r = c2.post("/blocks/execute", json={"encoded": blk["encoded"]})
        assert r.status_code == 200
        assert c2.get("/status").json()["state_root"] == blk["state_root"]
        # the same block again does not follow the new head
        assert c2.post("/blocks/execute", json={"encoded": blk["encoded"]}).status_code == 409
    other.close()


def test_conflicting_transactions_wait(client):
    # both set x to a different string; only one fits per block
    client.post("/transactions", json=script_body([["string_set", "x", "01"]], "01" * 32))
    client.post("/transactions", json=script_body([["string_set", "x", "02"]], "02" * 32))
    first = client.post("/blocks/propose", json={}).json()
    assert len(first["transactions"]) == 1
    assert client.get("/status").json()["mempool"] == 1
    assert len(client.post("/blocks/propose", json={}).json()["transactions"]) == 1


def test_restart_resumes_from_log(tmp_path):
    log = str(tmp_path / "log")
    node = LedgerNode(log_dir=log)
    with TestClient(create_app(node)) as c:
        c.post("/transactions", json=script_body([["int64_add", "x", 3]]))
        root = c.post("/blocks/propose", json={}).json()["state_root"]
    node.close()
    again = LedgerNode(log_dir=log)
    with TestClient(create_app(again)) as c:
        st = c.get("/status").json()
        assert st["height"] == 1 and st["state_root"] == root and st["persist"]
        assert c.get("/blocks/1").json()["state_root"] == root
        c.post("/transactions", json=script_body([["int64_add", "x", 1]], "22" * 32))
        c.post("/blocks/propose", json={})
        assert c.get(f"/state/{addr('x')}").json()["value"] == 4
    again.close()


def test_expired_transactions_leave_the_mempool():
    cfg = WorkloadConfig(accounts=3)
    pop = make_population(cfg)
    node = LedgerNode(pop.registry, pop.genesis.values)
    tx = pop.wallet.payment(pop.keys[0], pop.accounts[0], pop.accounts[1], 1, 0, 1)
    blocker = pop.wallet.payment(pop.keys[0], pop.accounts[0], pop.accounts[2], 1, 1, 1)
    with TestClient(create_app(node)) as c:
        c.post("/transactions", json={"encoded": tx.encoded.hex()})
        c.post("/transactions", json={"encoded": blocker.encoded.hex()})
        blk = c.post("/blocks/propose", json={}).json()
        assert len(blk["transactions"]) == 2
        stale = pop.wallet.payment(pop.keys[1], pop.accounts[1], pop.accounts[2], 1, 2, 1)
        c.post("/transactions", json={"encoded": stale.encoded.hex()})
        assert len(c.post("/blocks/propose", json={}).json()["transactions"]) == 0
        assert c.get("/status").json()["mempool"] == 0
    node.close()


def test_bench_endpoint(client):
    r = client.post("/bench", json={"accounts": 20, "batch_size": 50, "blocks": 1, "warmup": 0,
                                    "verify": True})
    body = r.json()
    assert body["summary"]["verify_failures"] == 0 and len(body["rounds"]) == 1
    assert client.post("/bench", json={"workload": "nope"}).status_code == 422
