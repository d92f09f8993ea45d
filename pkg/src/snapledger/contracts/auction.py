"""Sealed-until-close second-price auction with token escrow.

Bids live in an ordered set tagged by price, so after the close block the top
two bids are simply the last two elements. The winner pays the second-highest
price (0 with a single bid) and gets the difference to its own bid back;
losers reclaim their escrow one by one. Refunds insert the bid hash into a
second set, which makes a second refund of the same bid conflict. Settling
inserts a fixed marker into that set for the same reason.

Methods, all keyed by a 32-byte auction id:

* ``0 CREATE`` id | close block (u64) | extra set capacity (u16); the caller
  becomes the seller
* ``1 BID``    id | price (u64); escrows ``price`` from the caller
* ``2 SETTLE`` id
* ``3 REFUND`` id | bid hash (32)
"""

from __future__ import annotations

import struct
from typing import Optional

from snapledger.contracts.host import Contract, HostContext, derive_key
from snapledger.contracts.token import TRANSFER, TRANSFER_FROM, transfer_from_input, transfer_input
from snapledger.errors import ProgramAbort
from snapledger.store import SetElement

CREATE = 0
BID = 1
SETTLE = 2
REFUND = 3

TOKEN_KEY = derive_key(b"auction/token")
SETTLED_MARKER = derive_key(b"auction/settled")

_CREATE = struct.Struct(">32sQH")
_BID = struct.Struct(">32sQ")
_REFUND = struct.Struct(">32s32s")
_CONFIG = struct.Struct(">32sQ")
_RECORD = struct.Struct(">32sQ")

# a nearly full bid set only takes bids that would enter the top two
CROWDED_NUM, CROWDED_DEN = 3, 4


def config_key(auction: bytes) -> bytes:
    return derive_key(b"auction", auction)


def bids_key(auction: bytes) -> bytes:
    return derive_key(b"bids", auction)


def refunds_key(auction: bytes) -> bytes:
    return derive_key(b"refunds", auction)


def bid_record_key(auction: bytes, bid_hash: bytes) -> bytes:
    return derive_key(b"bid", auction, bid_hash)


def outcome_key(auction: bytes) -> bytes:
    return derive_key(b"outcome", auction)


def bid_hash(price: int, bidder: bytes) -> bytes:
    return derive_key(struct.pack(">Q", price), bidder)


def create_input(auction: bytes, close_block: int, extra_capacity: int = 0) -> bytes:
    return _CREATE.pack(auction, close_block, extra_capacity)


def bid_input(auction: bytes, price: int) -> bytes:
    return _BID.pack(auction, price)


def refund_input(auction: bytes, h: bytes) -> bytes:
    return _REFUND.pack(auction, h)


def second_price(elements) -> tuple[Optional[SetElement], int]:
    """(winning element, price paid) for bids sorted by (price, hash)."""
    if not elements:
        return None, 0
    return elements[-1], elements[-2].tag if len(elements) > 1 else 0


def _unpack(s: struct.Struct, data: bytes) -> tuple:
    if len(data) != s.size:
        raise ProgramAbort("malformed input")
    return s.unpack(data)


class Auction(Contract):
    METHODS = {CREATE: "create", BID: "bid", SETTLE: "settle", REFUND: "refund"}

    def _config(self, ctx: HostContext, auction: bytes) -> tuple[bytes, int]:
        raw = ctx.string_get(config_key(auction))
        if not raw:
            raise ProgramAbort("no such auction")
        return _CONFIG.unpack(raw)

    def _token(self, ctx: HostContext) -> bytes:
        token = ctx.string_get(TOKEN_KEY)
        if len(token) != 32:
            raise ProgramAbort("auction has no token configured")
        return token

    def create(self, ctx: HostContext, data: bytes) -> None:
        auction, close_block, extra = _unpack(_CREATE, data)
        if ctx.exists(config_key(auction)):
            raise ProgramAbort("auction exists")
        if close_block <= ctx.get_block_number():
            raise ProgramAbort("close block already passed")
        ctx.string_set(config_key(auction), _CONFIG.pack(ctx.caller, close_block))
        if extra:
            ctx.set_limit_increase(bids_key(auction), extra)
            ctx.set_limit_increase(refunds_key(auction), extra)

    def bid(self, ctx: HostContext, data: bytes) -> None:
        auction, price = _unpack(_BID, data)
        _, close_block = self._config(ctx, auction)
        if ctx.get_block_number() >= close_block:
            raise ProgramAbort("auction closed")
        bids = ctx.set_get(bids_key(auction))
        els = bids.elements
        if (
            len(els) >= 2
            and len(els) * CROWDED_DEN >= bids.limit * CROWDED_NUM
            and price < els[-2].tag
        ):
            raise ProgramAbort("bid set crowded and bid below the second-highest")
        bidder = ctx.caller
        h = bid_hash(price, bidder)
        ctx.set_insert(bids_key(auction), price, h)
        ctx.string_set(bid_record_key(auction, h), _RECORD.pack(bidder, price))
        ctx.call(self._token(ctx), TRANSFER_FROM, transfer_from_input(bidder, self.address, price))

    def settle(self, ctx: HostContext, data: bytes) -> None:
        (auction,) = _unpack(struct.Struct(">32s"), data)
        seller, close_block = self._config(ctx, auction)
        if ctx.get_block_number() < close_block:
            raise ProgramAbort("auction still open")
        winner_el, price = second_price(ctx.set_get(bids_key(auction)).elements)
        ctx.set_insert(refunds_key(auction), 0, SETTLED_MARKER)
        token = self._token(ctx)
        if winner_el is None:
            ctx.string_set(outcome_key(auction), bytes(32) + struct.pack(">Q", 0))
            return
        winner, bid_price = _RECORD.unpack(ctx.string_get(bid_record_key(auction, winner_el.hash)))
        ctx.string_set(outcome_key(auction), _RECORD.pack(winner, price))
        if price:
            ctx.call(token, TRANSFER, transfer_input(seller, price))
        if bid_price > price:
            ctx.call(token, TRANSFER, transfer_input(winner, bid_price - price))

    def refund(self, ctx: HostContext, data: bytes) -> None:
        auction, h = _unpack(_REFUND, data)
        _, close_block = self._config(ctx, auction)
        if ctx.get_block_number() < close_block:
            raise ProgramAbort("auction still open")
        raw = ctx.string_get(bid_record_key(auction, h))
        if not raw:
            raise ProgramAbort("no such bid")
        els = ctx.set_get(bids_key(auction)).elements
        if els and els[-1].hash == h:
            raise ProgramAbort("the winning bid is settled, not refunded")
        bidder, price = _RECORD.unpack(raw)
        ctx.set_insert(refunds_key(auction), price, h)
        ctx.call(self._token(ctx), TRANSFER, transfer_input(bidder, price))
