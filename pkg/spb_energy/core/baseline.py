"""Escrow-by-smart-contract trading, the comparison protocol.

Each trade stores three transactions on chain: the escrow contract
deployment, the consumer's payment into it, and the confirmation that pays
the producer out of escrow. Every step waits for the previous one to be mined.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Optional

from spb_energy.core.constants import DEFAULT_TX_SIZES
from spb_energy.core.crypto import Address, Hash, KeyPair, derive_address
from spb_energy.core.energy_market import EnergyBook
from spb_energy.core.simchain import (
    Blockchain,
    Ledger,
    Transaction,
    TxKind,
    TxRule,
    make_transaction,
)
from spb_energy.core.simnet import SimEvent
from spb_energy.core.trade_protocol import (
    BlockAnnounce,
    EnergyDelivery,
    Node,
    PhaseMachine,
    SimContext,
    StartTrade,
    TradeOutcome,
    TradeRecord,
    TradeResult,
    TxSubmit,
    run_trade,
)

if TYPE_CHECKING:
    from spb_energy.core.world import World

logger = logging.getLogger(__name__)


class BaselinePhase(Enum):
    NEW = "new"
    DEPLOYED = "deployed"
    PAID = "paid"
    CONFIRMED = "confirmed"


BASELINE_TRANSITIONS = {
    BaselinePhase.NEW: {BaselinePhase.DEPLOYED},
    BaselinePhase.DEPLOYED: {BaselinePhase.PAID},
    BaselinePhase.PAID: {BaselinePhase.CONFIRMED},
    BaselinePhase.CONFIRMED: set(),
}


def escrow_address(contract_id: bytes) -> Address:
    return derive_address(bytes(contract_id))


class BaselineContract:
    """Transaction rules of the per-trade escrow contract."""

    def __init__(
        self,
        chain: Blockchain,
        book: EnergyBook,
        tx_sizes: Optional[Dict[str, int]] = None,
    ):
        self.chain = chain
        self.book = book
        self.tx_sizes = dict(DEFAULT_TX_SIZES, **(tx_sizes or {}))
        chain.register_rule(TxKind.BASELINE_DEPLOY, TxRule(self._apply_deploy, lambda tx: {}))
        chain.register_rule(
            TxKind.BASELINE_PAY_IN, TxRule(self._apply_pay_in, self._pay_in_deltas)
        )
        chain.register_rule(
            TxKind.BASELINE_CONFIRM_PAYOUT,
            TxRule(self._apply_confirm, self._confirm_deltas),
        )

    def deploy_tx(
        self, consumer: bytes, producer: bytes, amount: int, energy: int, nonce: int
    ) -> Transaction:
        return make_transaction(
            TxKind.BASELINE_DEPLOY,
            consumer,
            {"producer": bytes(producer), "amount": amount, "energy": energy},
            self.chain.fee,
            target_size=self.tx_sizes[TxKind.BASELINE_DEPLOY.value],
            nonce=nonce,
        )

    def pay_in_tx(self, consumer: bytes, contract_id: bytes, amount: int) -> Transaction:
        return make_transaction(
            TxKind.BASELINE_PAY_IN,
            consumer,
            {"contract": bytes(contract_id), "amount": amount},
            self.chain.fee,
            target_size=self.tx_sizes[TxKind.BASELINE_PAY_IN.value],
        )

    def confirm_tx(
        self, consumer: bytes, contract_id: bytes, producer: bytes, amount: int, energy: int
    ) -> Transaction:
        return make_transaction(
            TxKind.BASELINE_CONFIRM_PAYOUT,
            consumer,
            {
                "contract": bytes(contract_id),
                "producer": bytes(producer),
                "amount": amount,
                "energy": energy,
            },
            self.chain.fee,
            target_size=self.tx_sizes[TxKind.BASELINE_CONFIRM_PAYOUT.value],
        )

    def escrow_balance(self, contract_id: bytes) -> int:
        address = escrow_address(contract_id)
        if not self.chain.ledger.has_account(address):
            return 0
        return self.chain.ledger.account(address).total

    def _apply_deploy(self, ledger: Ledger, tx: Transaction):
        self.book.reserve(tx.field("producer"), tx.field("energy"))
        ledger.create_account(escrow_address(tx.id))

    def _apply_pay_in(self, ledger: Ledger, tx: Transaction):
        ledger.transfer(tx.sender, escrow_address(tx.field("contract")), tx.field("amount"))

    def _pay_in_deltas(self, tx: Transaction) -> Dict[bytes, int]:
        amount = tx.field("amount")
        return {bytes(tx.sender): -amount, escrow_address(tx.field("contract")): amount}

    def _apply_confirm(self, ledger: Ledger, tx: Transaction):
        ledger.transfer(
            escrow_address(tx.field("contract")), tx.field("producer"), tx.field("amount")
        )
        self.book.consume(tx.field("producer"), tx.field("energy"))

    def _confirm_deltas(self, tx: Transaction) -> Dict[bytes, int]:
        amount = tx.field("amount")
        return {escrow_address(tx.field("contract")): -amount, bytes(tx.field("producer")): amount}


@dataclass(frozen=True)
class EnergyRequest:
    trade_id: Hash
    energy: int


@dataclass
class BaselineTrade:
    record: TradeRecord
    machine: PhaseMachine
    contract_id: Optional[Hash] = None
    pay_in_id: Optional[Hash] = None
    confirm_id: Optional[Hash] = None
    awaiting: Optional[Hash] = None
    tx_ids: List[Hash] = field(default_factory=list)

    @property
    def phase(self) -> BaselinePhase:
        return self.machine.phase


class BaselineConsumerNode(Node):
    def __init__(
        self, node_id: str, ctx: SimContext, keypair: KeyPair, contract: BaselineContract
    ):
        super().__init__(node_id, ctx)
        self.keypair = keypair
        self.address = keypair.address
        self.contract = contract
        self.trades: Dict[Hash, BaselineTrade] = {}
        self._pending_starts: Dict[int, TradeRecord] = {}
        self._nonce = 0
        ctx.directory[self.address] = node_id
        self.handlers.update(
            {BlockAnnounce: self._on_block, EnergyDelivery: self._on_delivery}
        )

    def schedule_trade(self, record: TradeRecord, start_at: int):
        self._pending_starts[record.index] = record
        self.net.set_timer(self.node_id, max(0, start_at - self.net.now), StartTrade(record.index))

    def on_timer(self, event: SimEvent):
        # Escrow trades pay the requested amount; a price ceiling is not negotiated
        if isinstance(event.payload, StartTrade):
            self.start(self._pending_starts.pop(event.payload.index))

    def start(self, record: TradeRecord) -> BaselineTrade:
        """Deploy the escrow contract for one trade."""
        self._nonce += 1
        tx = self.contract.deploy_tx(
            self.address, record.producer, record.amount, record.energy, self._nonce
        )
        record.started_at = self.net.now
        self.ctx.bind(record, tx.id)
        trade = BaselineTrade(
            record=record,
            machine=PhaseMachine(BASELINE_TRANSITIONS, BaselinePhase.NEW, f"baseline {tx.id.hex()[:8]}"),
            contract_id=tx.id,
            awaiting=tx.id,
        )
        self.trades[tx.id] = trade
        self.ctx.step(tx.id, 1, self.node_id, "deploy_contract")
        self.send_to_miner(TxSubmit(tx))
        return trade

    def _on_block(self, event: SimEvent):
        announce: BlockAnnounce = event.payload
        mined = set(announce.tx_ids)
        for trade in list(self.trades.values()):
            if trade.awaiting is None or trade.awaiting not in mined:
                continue
            trade.tx_ids.append(trade.awaiting)
            trade.record.tx_ids.append(trade.awaiting)
            trade.awaiting = None
            if trade.phase == BaselinePhase.NEW:
                trade.machine.advance(BaselinePhase.DEPLOYED)
                self._pay_in(trade)
            elif trade.phase == BaselinePhase.DEPLOYED:
                trade.machine.advance(BaselinePhase.PAID)
                self._request_energy(trade)
            elif trade.phase == BaselinePhase.PAID:
                trade.machine.advance(BaselinePhase.CONFIRMED)
                self.ctx.step(trade.contract_id, 5, "contract", "pay_producer", announce.timestamp)
                self.ctx.finish(trade.record, TradeResult.SETTLED_PAID, announce.timestamp)

    def _pay_in(self, trade: BaselineTrade):
        tx = self.contract.pay_in_tx(self.address, trade.contract_id, trade.record.amount)
        trade.pay_in_id = tx.id
        trade.awaiting = tx.id
        self.ctx.step(trade.contract_id, 2, self.node_id, "pay_in")
        self.send_to_miner(TxSubmit(tx))

    def _request_energy(self, trade: BaselineTrade):
        producer_node = self.ctx.directory.get(bytes(trade.record.producer))
        if producer_node is None:
            logger.warning("No node for producer %s", trade.record.producer.hex()[:16])
            return
        self.net.unicast(
            self.node_id, producer_node, EnergyRequest(trade.contract_id, trade.record.energy)
        )

    def _on_delivery(self, event: SimEvent):
        delivery: EnergyDelivery = event.payload
        trade = self.trades.get(delivery.trade_id)
        if trade is None or trade.phase != BaselinePhase.PAID or trade.confirm_id is not None:
            return
        record = trade.record
        tx = self.contract.confirm_tx(
            self.address, trade.contract_id, record.producer, record.amount, record.energy
        )
        trade.confirm_id = tx.id
        trade.awaiting = tx.id
        self.ctx.step(trade.contract_id, 4, self.node_id, "confirm_payout")
        self.send_to_miner(TxSubmit(tx))


class BaselineProducerNode(Node):
    def __init__(self, node_id: str, ctx: SimContext, keypair: KeyPair):
        super().__init__(node_id, ctx)
        self.keypair = keypair
        self.address = keypair.address
        ctx.directory[self.address] = node_id
        self.handlers.update({EnergyRequest: self._on_request})

    def _on_request(self, event: SimEvent):
        request: EnergyRequest = event.payload
        self.ctx.step(request.trade_id, 3, self.node_id, "transfer_energy")
        self.net.post(
            event.source,
            EnergyDelivery(request.trade_id, request.energy),
            self.ctx.transfer_latency_ms,
            source=self.node_id,
        )


def run_baseline_trade(
    world: "World",
    consumer: int = 0,
    producer: int = 0,
    amount: Optional[int] = None,
    energy: Optional[int] = None,
) -> TradeOutcome:
    """Run one escrow trade; the world must be built for the baseline protocol."""
    if world.protocol != "baseline":
        raise ValueError(f"World runs the {world.protocol} protocol")
    return run_trade(world, consumer, producer, amount=amount, energy=energy)
