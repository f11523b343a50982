"""The miner node: chain, CTP database and market contract behind one handler."""

import logging
from dataclasses import dataclass
from typing import List, Optional

from spb_energy.core.ctp_store import CtpStatus, CtpStore
from spb_energy.core.energy_market import EnergyMarket, Settlement
from spb_energy.core.exceptions import SpbError
from spb_energy.core.simchain import Block, Blockchain, TxKind
from spb_energy.core.simnet import SimEvent
from spb_energy.core.trade_protocol import (
    BlockAnnounce,
    CtpAck,
    CtpNotice,
    CtpSubmit,
    ErcResult,
    ErcSubmit,
    Node,
    SimContext,
    TimeoutRequest,
    TimeoutResult,
    TxSubmit,
    summarize,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MineTick:
    at: int


class MinerNode(Node):
    def __init__(
        self,
        node_id: str,
        ctx: SimContext,
        chain: Blockchain,
        mining_period_ms: int,
        store: Optional[CtpStore] = None,
        market: Optional[EnergyMarket] = None,
        notify_producers: bool = False,
    ):
        """Miner hosting the chain and, for SPB, the CTP database and market.

        Args:
            node_id: Network id of the miner
            ctx: Shared simulation context
            chain: Chain the miner extends
            mining_period_ms: Interval between mining ticks
            store: CTP database (None for the baseline protocol)
            market: Energy-market contract (None for the baseline protocol)
            notify_producers: Send a CtpNotice on admission instead of waiting
                for the block announcement
        """
        super().__init__(node_id, ctx)
        self.chain = chain
        self.mining_period_ms = mining_period_ms
        self.store = store
        self.market = market
        self.notify_producers = notify_producers
        self.next_tick_at: Optional[int] = None
        self.announced: List[BlockAnnounce] = []
        self._expired = []
        self.handlers.update(
            {
                CtpSubmit: self._on_ctp,
                ErcSubmit: self._on_erc,
                TimeoutRequest: self._on_timeout,
                TxSubmit: self._on_tx,
            }
        )
        if market is not None:
            market.settled_listeners.append(self._on_settled)

    def start(self, first_tick_at: Optional[int] = None):
        """Schedule the first mining tick."""
        at = self.net.now + self.mining_period_ms if first_tick_at is None else first_tick_at
        self.next_tick_at = at
        self.net.set_timer(self.node_id, at - self.net.now, MineTick(at))

    def ctp_db_hash(self) -> bytes:
        if self.store is None:
            return self.chain.last_ctp_db_hash
        return self.store.db_hash()

    def reply(self, event: SimEvent, payload):
        if event.source is not None:
            self.net.unicast(self.node_id, event.source, payload)

    def _on_ctp(self, event: SimEvent):
        ctp = event.payload.ctp
        try:
            ctp_id = self.store.insert_ctp(ctp, self.net.now)
        except SpbError as e:
            logger.warning("Refused CTP %s: %s", ctp.id.hex()[:16], e.code)
            self.reply(event, CtpAck(ctp.id, False, e.code, e.message))
            return
        self.reply(event, CtpAck(ctp_id, True))
        producer_node = self.ctx.directory.get(bytes(ctp.producer))
        if self.notify_producers and producer_node is not None:
            self.net.unicast(self.node_id, producer_node, CtpNotice(summarize(ctp)))

    def _on_erc(self, event: SimEvent):
        erc = event.payload.erc
        consumer_node = None
        try:
            record = self.store.get(erc.ctp_id)
            consumer_node = self.ctx.directory.get(bytes(record.ctp.consumer))
            self.market.settle_erc(erc, self.net.now)
        except SpbError as e:
            logger.warning("Refused ERC for %s: %s", erc.ctp_id.hex()[:16], e.code)
            self.reply(event, ErcResult(erc.ctp_id, False, e.code, e.message))
            return
        result = ErcResult(erc.ctp_id, True)
        self.reply(event, result)
        if consumer_node is not None and consumer_node != event.source:
            self.net.unicast(self.node_id, consumer_node, result)

    def _on_timeout(self, event: SimEvent):
        ctp_id = event.payload.ctp_id
        try:
            record = self.store.get(ctp_id)
            was_pending = record.status == CtpStatus.PENDING
            self.store.timeout_request(ctp_id, self.net.now)
        except SpbError as e:
            self.reply(event, TimeoutResult(ctp_id, False, e.code, e.message))
            return
        if was_pending:
            self._expired.append(record.id)
        self.reply(event, TimeoutResult(ctp_id, True))

    def _on_tx(self, event: SimEvent):
        try:
            self.chain.submit_transaction(event.payload.tx)
        except SpbError as e:
            logger.warning("Refused transaction from %s: %s", event.source, e.code)

    def _on_settled(self, settlement: Settlement, block: Block):
        self.ctx.step(settlement.ctp_id, 6, "contract", "pay_producer", block.header.timestamp)

    def on_timer(self, event: SimEvent):
        if isinstance(event.payload, MineTick):
            self.tick()

    def tick(self) -> Optional[Block]:
        """Sweep expired CTPs, mine, announce, and schedule the next tick."""
        now = self.net.now
        if self.store is not None:
            self._expired.extend(self.store.sweep_expired(now))
        block = self.chain.mine_tick(now, self.ctp_db_hash())
        if block is not None:
            self.announce(block)
        self.next_tick_at = now + self.mining_period_ms
        self.net.set_timer(self.node_id, self.mining_period_ms, MineTick(self.next_tick_at))
        return block

    def announce(self, block: Block) -> BlockAnnounce:
        new_ctps = ()
        if self.store is not None:
            new_ctps = tuple(summarize(self.store.get(i).ctp) for i in self.store.mark(block.height))
        settled = tuple(
            (tx.field("ctp_id"), tx.id) for tx in block.txs if tx.kind == TxKind.SETTLED_CTP
        )
        announce = BlockAnnounce(
            height=block.height,
            timestamp=block.header.timestamp,
            block_hash=block.hash,
            ctp_db_hash=block.header.ctp_db_hash,
            tx_ids=tuple(tx.id for tx in block.txs),
            new_ctps=new_ctps,
            settled=settled,
            expired_ctp_ids=tuple(self._expired),
        )
        self._expired = []
        self.announced.append(announce)
        self.net.broadcast(self.node_id, announce)
        return announce
