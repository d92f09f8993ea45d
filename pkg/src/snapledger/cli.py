"""Command line: the benchmark, the HTTP service, and a thin client for it."""

from __future__ import annotations

import json
import sys
from typing import Optional

import click

from snapledger.bench import (
    WORKLOADS,
    WorkloadConfig,
    account_id,
    format_table,
    key_seed,
    make_population,
    run_benchmark,
    write_csv,
)

DEFAULT_SERVER = "http://127.0.0.1:8545"


def _thread_list(ctx, param, value: str) -> list[int]:
    try:
        out = [int(x) for x in value.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter("expected a number or a comma separated list")
    if not out or min(out) < 1:
        raise click.BadParameter("thread counts must be positive")
    return out


def _client(server: str):
    import httpx

    return httpx.Client(base_url=server, timeout=None)


def _call(server: str, method: str, path: str, body: Optional[dict] = None) -> dict:
    with _client(server) as c:
        r = c.request(method, path, json=body)
    if r.status_code >= 400:
        raise click.ClickException(f"{r.status_code}: {r.json().get('detail', r.text)}")
    return r.json()


@click.group()
@click.version_option(package_name="artifact")
def main() -> None:
    """Deterministic parallel ledger engine."""


@main.command()
@click.option("--accounts", default=10_000, show_default=True, type=click.IntRange(min=2))
@click.option("--batch-size", default=10_000, show_default=True, type=click.IntRange(min=1))
@click.option("--threads", default="1", show_default=True, callback=_thread_list,
              help="Worker count, or a comma separated sweep such as 1,2,4,8.")
@click.option("--blocks", default=3, show_default=True, type=click.IntRange(min=1),
              help="Measured rounds.")
@click.option("--warmup", default=1, show_default=True, type=click.IntRange(min=0))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--persist/--no-persist", default=False, help="Log every block to disk.")
@click.option("--persist-dir", default=None, type=click.Path(file_okay=False),
              help="Keep the log here instead of a temporary directory.")
@click.option("--verify/--no-verify", default=False, help="Re-execute each block and compare roots.")
@click.option("--chain/--independent", default=False,
              help="Build each round on the previous one instead of on genesis.")
@click.option("--workload", default="payments", show_default=True, type=click.Choice(WORKLOADS))
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="Write rounds as CSV.")
@click.option("--server", default=None, help="Run on a service instead of in-process.")
@click.option("--json", "as_json", is_flag=True, help="Print summaries as JSON.")
def bench(accounts, batch_size, threads, blocks, warmup, seed, persist, persist_dir, verify,
          chain, workload, out, server, as_json) -> None:
    """Run the payments benchmark. Exits with status 1 if any block fails to verify."""
    if server is not None:
        failures = 0
        for t in threads:
            res = _call(server, "POST", "/bench", dict(
                accounts=accounts, batch_size=batch_size, threads=t, blocks=blocks,
                warmup=warmup, seed=seed, persist=persist, verify=verify, workload=workload,
            ))
            click.echo(json.dumps(res["summary"]))
            failures += res["summary"]["verify_failures"]
        sys.exit(1 if failures else 0)

    reports = []
    population = None
    for t in threads:
        cfg = WorkloadConfig(
            accounts=accounts, batch_size=batch_size, threads=t, blocks=blocks, warmup=warmup,
            persist=persist, persist_dir=persist_dir, verify=verify, seed=seed,
            workload=workload, chain=chain,
        )
        if population is None:
            population = make_population(cfg)
        rep = run_benchmark(cfg, population)
        reports.append(rep)
        if as_json:
            click.echo(json.dumps(rep.summary()))
    rows = [r for rep in reports for r in rep.rounds]
    if not as_json:
        click.echo(format_table(rows))
        s = reports[0].summary()
        click.echo(
            f"tx size {s['tx_bytes']:.0f} bytes; {s['reads_per_tx']} reads and "
            f"{s['writes_per_tx']} writes per payment"
        )
    if out:
        write_csv(reports, out)
    failures = sum(rep.verify_failures for rep in reports)
    if failures:
        click.echo(f"verification failed for {failures} block(s)", err=True)
        sys.exit(1)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8545, show_default=True, type=int)
@click.option("--threads", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--log-dir", default=None, type=click.Path(file_okay=False),
              help="Persist blocks here; an existing log is replayed on start.")
@click.option("--demo-accounts", default=0, show_default=True, type=click.IntRange(min=0),
              help="Fund this many benchmark accounts in the genesis state.")
@click.option("--seed", default=0, show_default=True, type=int)
def serve(host, port, threads, log_dir, demo_accounts, seed) -> None:
    """Run the HTTP service."""
    import uvicorn

    from snapledger.node import LedgerNode
    from snapledger.service import create_app

    registry, genesis = None, None
    if demo_accounts:
        pop = make_population(WorkloadConfig(accounts=max(2, demo_accounts), seed=seed))
        registry, genesis = pop.registry, pop.genesis.values
    node = LedgerNode(registry, genesis, threads=threads, log_dir=log_dir)
    try:
        uvicorn.run(create_app(node), host=host, port=port)
    finally:
        node.close()


@main.command()
@click.option("--server", default=DEFAULT_SERVER, show_default=True)
def status(server) -> None:
    """Show the service's head."""
    click.echo(json.dumps(_call(server, "GET", "/status"), indent=2))


@main.command()
@click.argument("address")
@click.option("--server", default=DEFAULT_SERVER, show_default=True)
def get(address, server) -> None:
    """Show the value at a 64-byte hex ADDRESS."""
    click.echo(json.dumps(_call(server, "GET", f"/state/{address}"), indent=2))


@main.command()
@click.option("--max", "max_transactions", default=10_000, show_default=True,
              type=click.IntRange(min=1))
@click.option("--server", default=DEFAULT_SERVER, show_default=True)
def propose(max_transactions, server) -> None:
    """Ask the service to build the next block."""
    blk = _call(server, "POST", "/blocks/propose", {"max_transactions": max_transactions})
    click.echo(
        f"block {blk['block_number']}: {len(blk['transactions'])} transactions, "
        f"state root {blk['state_root']}"
    )


@main.command()
@click.option("--from", "sender", required=True, type=click.IntRange(min=0),
              help="Index of the paying demo account.")
@click.option("--to", "receiver", required=True, type=click.IntRange(min=0))
@click.option("--amount", default=1, show_default=True, type=click.IntRange(min=0))
@click.option("--nonce", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--ttl", default=10, show_default=True, type=click.IntRange(min=0),
              help="Blocks until the payment expires.")
@click.option("--seed", default=0, show_default=True, type=int,
              help="Seed the service's demo accounts were created with.")
@click.option("--server", default=DEFAULT_SERVER, show_default=True)
def pay(sender, receiver, amount, nonce, ttl, seed, server) -> None:
    """Sign a wallet payment between demo accounts and submit it."""
    from snapledger.contracts import Wallet, contract_address
    from snapledger.contracts.wallet import Keypair

    height = _call(server, "GET", "/status")["height"]
    wallet = Wallet(contract_address("wallet"))
    tx = wallet.payment(
        Keypair(key_seed(seed, sender)), account_id(seed, sender), account_id(seed, receiver),
        amount, nonce, height + 1 + ttl,
    )
    res = _call(server, "POST", "/transactions", {"encoded": tx.encoded.hex()})
    click.echo(res["tx_hash"])


@main.command()
@click.argument("log_dir", type=click.Path(exists=True, file_okay=False))
def replay(log_dir) -> None:
    """Rebuild the state recorded in LOG_DIR and check its root."""
    from snapledger.errors import LogCorruption
    from snapledger.persist import replay_log

    try:
        rep = replay_log(log_dir)
    except LogCorruption as e:
        raise click.ClickException(str(e))
    click.echo(
        f"block {rep.block_number}: {len(rep.state)} keys from {rep.node_count} node records, "
        f"state root {rep.state.root_hash().hex()}"
    )


if __name__ == "__main__":
    main()
