"""Host API and the bundled example contracts."""

from snapledger.contracts.auction import Auction
from snapledger.contracts.host import Contract, HostContext, Registry, derive_key
from snapledger.contracts.locks import Locks
from snapledger.contracts.script import Script
from snapledger.contracts.sequencer import Sequencer
from snapledger.contracts.token import Token
from snapledger.contracts.wallet import Wallet


def contract_address(name: str) -> bytes:
    """Conventional address of a bundled contract instance."""
    return derive_key(b"contract/", name.encode())


def standard_registry() -> Registry:
    """One instance of every bundled contract at its conventional address."""
    reg = Registry()
    for name, cls in (
        ("token", Token),
        ("wallet", Wallet),
        ("locks", Locks),
        ("auction", Auction),
        ("sequencer", Sequencer),
        ("script", Script),
    ):
        reg.register(cls(contract_address(name)))
    return reg


__all__ = [
    "Auction",
    "Contract",
    "HostContext",
    "Locks",
    "Registry",
    "Script",
    "Sequencer",
    "Token",
    "Wallet",
    "contract_address",
    "derive_key",
    "standard_registry",
]
