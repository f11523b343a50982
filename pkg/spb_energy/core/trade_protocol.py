"""Consumer, producer and meter state machines for CTP/ERC trading.

A trade is an atomic meta-transaction: the consumer's CTP puts the price on
hold, the consumer's meter confirms receipt with an ERC, and only the pair
pays the producer. Without a valid ERC before expiry the consumer's timer
fires, it asks the miner to time the CTP out, and the hold is released.

Every interaction between nodes goes through the simulated network.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple

from spb_energy.core.codec import encode_fields
from spb_energy.core.coe import (
    CoECertificate,
    Manufacturer,
    MeterIdentity,
    certify_meter,
    create_meter,
    next_signing_key,
    rebuild_tree,
)
from spb_energy.core.constants import NONCE_LENGTH
from spb_energy.core.crypto import (
    Address,
    Hash,
    KeyPair,
    PublicKey,
    Signature,
    digest,
    generate_keypair,
    sign,
)
from spb_energy.core.ctp_store import Ctp
from spb_energy.core.exceptions import (
    ExhaustedKeys,
    IllegalTransition,
    InvalidCtp,
    NoRoute,
    SpbError,
    UncertifiedSigner,
)
from spb_energy.core.merkle import MerkleProof
from spb_energy.core.overlay import (
    AgreedPrice,
    NegotiationParty,
    NegotiationResult,
    Overlay,
    negotiate,
)
from spb_energy.core.simnet import TIMER, SimEvent, SimNetwork

if TYPE_CHECKING:
    from spb_energy.core.energy_market import EnergyBook
    from spb_energy.core.world import World

logger = logging.getLogger(__name__)


#######################
# ERC
#######################


def erc_message(ctp_id: bytes, energy_amount: int) -> bytes:
    return encode_fields(["erc", ctp_id, energy_amount])


@dataclass(frozen=True)
class Erc:
    ctp_id: Hash
    energy_amount: int
    leaf_pk: PublicKey
    coe: CoECertificate
    proof: MerkleProof
    meter_sig: Signature

    def message(self) -> bytes:
        return erc_message(self.ctp_id, self.energy_amount)

    def canonical(self) -> bytes:
        return encode_fields(
            [
                self.ctp_id,
                self.energy_amount,
                self.leaf_pk,
                self.coe.encode(),
                self.proof.encode(),
                self.meter_sig,
            ]
        )


def make_ctp(
    consumer: KeyPair,
    producer_addr: bytes,
    amount: int,
    energy: int,
    ttl_ms: int,
    now: int,
    nonce: Optional[bytes] = None,
) -> Ctp:
    """Create a signed CTP expiring ``ttl_ms`` after ``now``.

    Args:
        consumer: Consumer key pair
        producer_addr: Address of the producer being paid
        amount: Price put on hold
        energy: Energy bought (kWh)
        ttl_ms: Time to live
        now: Creation time
        nonce: 8-byte nonce; derived from the other fields when omitted

    Returns
    -------
        Signed Ctp
    """
    if ttl_ms <= 0:
        raise InvalidCtp(f"CTP time to live must be positive, got {ttl_ms}")
    if amount <= 0 or energy <= 0:
        raise InvalidCtp("CTP amount and energy must be positive")
    if nonce is None:
        nonce = digest(
            encode_fields([consumer.public_key, producer_addr, amount, energy, now])
        )[:NONCE_LENGTH]
    ctp = Ctp(
        consumer=consumer.address,
        producer=Address(bytes(producer_addr)),
        amount=amount,
        energy=energy,
        expiry_time=now + ttl_ms,
        nonce=bytes(nonce),
        consumer_pk=consumer.public_key,
    )
    return ctp.signed(consumer.secret_key)


def make_erc(meter: MeterIdentity, ctp_id: bytes, energy_amount: int) -> Erc:
    """Sign an ERC with the meter's next unused leaf key.

    Raises
    ------
        ExhaustedKeys: when every leaf key of the current tree is used
        UncertifiedSigner: when the meter's tree has no certificate yet
    """
    if meter.certificate is None:
        raise UncertifiedSigner("Meter has no Certificate of Existence")
    keypair, proof = next_signing_key(meter)
    return Erc(
        ctp_id=Hash(bytes(ctp_id)),
        energy_amount=energy_amount,
        leaf_pk=keypair.public_key,
        coe=meter.certificate,
        proof=proof,
        meter_sig=sign(erc_message(ctp_id, energy_amount), keypair.secret_key),
    )


#######################
# Messages
#######################


@dataclass(frozen=True)
class CtpSummary:
    ctp_id: Hash
    consumer: Address
    producer: Address
    amount: int
    energy: int
    expiry_time: int


@dataclass(frozen=True)
class CtpSubmit:
    ctp: Ctp


@dataclass(frozen=True)
class CtpAck:
    ctp_id: Hash
    accepted: bool
    code: str = ""
    detail: str = ""


@dataclass(frozen=True)
class CtpNotice:
    summary: CtpSummary


@dataclass(frozen=True)
class ExpectDelivery:
    trade_id: Hash
    energy: int


@dataclass(frozen=True)
class EnergyDelivery:
    trade_id: Hash
    energy: int


@dataclass(frozen=True)
class ErcSubmit:
    erc: Erc


@dataclass(frozen=True)
class ErcResult:
    ctp_id: Hash
    accepted: bool
    code: str = ""
    detail: str = ""


@dataclass(frozen=True)
class TimeoutRequest:
    ctp_id: Hash


@dataclass(frozen=True)
class TimeoutResult:
    ctp_id: Hash
    refunded: bool
    code: str = ""
    detail: str = ""


@dataclass(frozen=True)
class TxSubmit:
    tx: object


@dataclass(frozen=True)
class BlockAnnounce:
    height: int
    timestamp: int
    block_hash: Hash
    ctp_db_hash: Hash
    tx_ids: Tuple[Hash, ...]
    new_ctps: Tuple[CtpSummary, ...] = ()
    settled: Tuple[Tuple[Hash, Hash], ...] = ()  # (ctp id, SettledCtp tx id)
    expired_ctp_ids: Tuple[Hash, ...] = ()


@dataclass(frozen=True)
class StartTrade:
    index: int


@dataclass(frozen=True)
class PriceAgreed:
    index: int


@dataclass(frozen=True)
class ExpiryTimer:
    ctp_id: Hash


#######################
# State machines
#######################


class ConsumerPhase(Enum):
    IDLE = "idle"
    COMMITTED = "committed"
    AWAITING_MINING = "awaiting_mining"
    DONE = "done"
    TIMED_OUT = "timed_out"
    REFUNDED = "refunded"
    REJECTED = "rejected"


class ProducerPhase(Enum):
    IDLE = "idle"
    NOTIFIED = "notified"
    TRANSFERRING = "transferring"
    WITHHOLDING = "withholding"
    PAID = "paid"
    UNPAID = "unpaid"


class MeterPhase(Enum):
    IDLE = "idle"
    EXPECTING = "expecting"
    RECEIVED = "received"
    CONFIRMING = "confirming"
    CONFIRMED = "confirmed"
    REJECTED = "rejected"


CONSUMER_TRANSITIONS = {
    ConsumerPhase.IDLE: {ConsumerPhase.COMMITTED, ConsumerPhase.REJECTED},
    ConsumerPhase.COMMITTED: {ConsumerPhase.AWAITING_MINING, ConsumerPhase.TIMED_OUT},
    ConsumerPhase.AWAITING_MINING: {ConsumerPhase.DONE},
    ConsumerPhase.TIMED_OUT: {ConsumerPhase.REFUNDED},
    ConsumerPhase.DONE: set(),
    ConsumerPhase.REFUNDED: set(),
    ConsumerPhase.REJECTED: set(),
}

PRODUCER_TRANSITIONS = {
    ProducerPhase.IDLE: {ProducerPhase.NOTIFIED},
    ProducerPhase.NOTIFIED: {
        ProducerPhase.TRANSFERRING,
        ProducerPhase.WITHHOLDING,
        ProducerPhase.UNPAID,
    },
    ProducerPhase.TRANSFERRING: {ProducerPhase.PAID, ProducerPhase.UNPAID},
    ProducerPhase.WITHHOLDING: {ProducerPhase.UNPAID},
    ProducerPhase.PAID: set(),
    ProducerPhase.UNPAID: set(),
}

METER_TRANSITIONS = {
    MeterPhase.IDLE: {MeterPhase.EXPECTING, MeterPhase.RECEIVED, MeterPhase.CONFIRMING},
    MeterPhase.EXPECTING: {MeterPhase.RECEIVED},
    MeterPhase.RECEIVED: {MeterPhase.CONFIRMING},
    MeterPhase.CONFIRMING: {MeterPhase.CONFIRMED, MeterPhase.REJECTED},
    MeterPhase.CONFIRMED: set(),
    MeterPhase.REJECTED: set(),
}


class PhaseMachine:
    """A finite-state machine that refuses transitions outside its table."""

    def __init__(self, table: Dict[Enum, set], initial: Enum, name: str = ""):
        self.table = table
        self.phase = initial
        self.name = name
        self.history: List[Enum] = [initial]

    def can_advance(self, phase: Enum) -> bool:
        return phase in self.table[self.phase]

    def advance(self, phase: Enum) -> Enum:
        if not self.can_advance(phase):
            raise IllegalTransition(
                f"{self.name}: {self.phase.value} -> {phase.value} is not allowed"
            )
        self.phase = phase
        self.history.append(phase)
        return phase

    @property
    def terminal(self) -> bool:
        return not self.table[self.phase]


#######################
# Trade bookkeeping
#######################


class TradeResult(Enum):
    SETTLED_PAID = "settled_paid"
    EXPIRED_REFUNDED = "expired_refunded"
    REJECTED = "rejected"
    # The run horizon ended before the consumer saw a terminal state
    UNFINISHED = "unfinished"


@dataclass
class TradeRecord:
    index: int
    protocol: str
    consumer: Address
    producer: Address
    amount: int
    energy: int
    reliable: bool = True
    ttl_ms: Optional[int] = None
    # Highest price per kWh the consumer negotiates up to; None pays ``amount`` as is
    ceiling: Optional[int] = None
    agreed_price: Optional[int] = None
    negotiation_rounds: int = 0
    started_at: Optional[int] = None
    trade_id: Optional[Hash] = None
    result: Optional[TradeResult] = None
    completed_at: Optional[int] = None
    tx_ids: List[Hash] = field(default_factory=list)
    error: str = ""

    @property
    def done(self) -> bool:
        return self.result is not None


@dataclass(frozen=True)
class TradeOutcome:
    index: int
    protocol: str
    ctp_id: str
    result: TradeResult
    consumer_fee_paid: int
    producer_received: int
    e2e_delay_ms: Optional[int]
    onchain_tx_count: int
    started_at: int
    completed_at: Optional[int]
    reliable: bool

    def as_row(self) -> dict:
        return {
            "id": self.ctp_id,
            "protocol": self.protocol,
            "result": self.result.value,
            "delay_ms": self.e2e_delay_ms,
            "fees": self.consumer_fee_paid,
            "tx_count": self.onchain_tx_count,
            "producer_received": self.producer_received,
            "started_at": self.started_at,
            "completed_at": self.completed_at,
            "reliable": self.reliable,
        }


@dataclass(frozen=True)
class TraceStep:
    trade: int
    step: int
    time: int
    actor: str
    action: str

    def line(self) -> str:
        return f"{self.step},{self.time},{self.actor},{self.action}"


class ScenarioTrace:
    """Per-trade step log following the reliable and unreliable flows."""

    def __init__(self):
        self.steps: List[TraceStep] = []

    def record(self, trade: int, step: int, time: int, actor: str, action: str):
        self.steps.append(TraceStep(trade, step, time, actor, action))

    def for_trade(self, trade: int) -> List[TraceStep]:
        return [s for s in self.steps if s.trade == trade]

    def lines(self, trade: Optional[int] = None) -> List[str]:
        steps = self.steps if trade is None else self.for_trade(trade)
        return [s.line() for s in steps]

    def actions(self, trade: int) -> List[Tuple[int, str]]:
        return [(s.step, s.action) for s in self.for_trade(trade)]


@dataclass
class SimContext:
    """State shared by the nodes of one simulated world."""

    net: SimNetwork
    miner_id: str
    manufacturer_pk: bytes
    fee: int
    ttl_ms: int
    transfer_latency_ms: int
    genesis_time: int = 0
    deployer_id: str = ""
    trace: ScenarioTrace = field(default_factory=ScenarioTrace)
    directory: Dict[bytes, str] = field(default_factory=dict)
    meters: Dict[bytes, str] = field(default_factory=dict)
    records: List[TradeRecord] = field(default_factory=list)
    by_trade_id: Dict[bytes, TradeRecord] = field(default_factory=dict)
    pick_signer: Optional[Callable[[MeterIdentity], MeterIdentity]] = None
    overlay: Optional[Overlay] = None
    book: Optional["EnergyBook"] = None
    parties: Dict[bytes, NegotiationParty] = field(default_factory=dict)
    opening_bid_pct: int = 50
    negotiation_rounds: int = 4

    def add_record(self, record: TradeRecord) -> TradeRecord:
        record.index = len(self.records)
        self.records.append(record)
        return record

    def bind(self, record: TradeRecord, trade_id: bytes):
        record.trade_id = Hash(bytes(trade_id))
        self.by_trade_id[bytes(trade_id)] = record

    def record_for(self, trade_id: bytes) -> Optional[TradeRecord]:
        return self.by_trade_id.get(bytes(trade_id))

    def step(self, trade_id: bytes, step: int, actor: str, action: str, time: Optional[int] = None):
        record = self.record_for(trade_id)
        if record is not None:
            self.trace.record(
                record.index, step, self.net.now if time is None else time, actor, action
            )

    def finish(self, record: TradeRecord, result: TradeResult, at: int, error: str = ""):
        if record.result is None:
            record.result = result
            record.completed_at = at
            record.error = error


#######################
# Nodes
#######################


def negotiate_price(ctx: SimContext, record: TradeRecord) -> Optional[NegotiationResult]:
    """Agree on a price per kWh with the record's producer over the overlay.

    On agreement the record's amount becomes the agreed price times its
    energy. Without one the trade is closed as rejected and no CTP is sent.

    Returns
    -------
        AgreedPrice or NoDeal, or None if the negotiation could not start
    """
    ceiling = record.ceiling
    try:
        account = ctx.book.account(record.producer)
        producer = ctx.parties.get(bytes(record.producer))
        if producer is None:
            raise NoRoute(f"Producer {record.producer.hex()[:16]} has no overlay endpoint")
        floor = account.price_per_kwh if account.floor_price is None else account.floor_price
        result = negotiate(
            ctx.overlay,
            ctx.parties[bytes(record.consumer)],
            producer,
            list_price=account.price_per_kwh,
            ceiling=ceiling,
            opening_price=max(1, ceiling * ctx.opening_bid_pct // 100),
            floor_price=min(floor, account.price_per_kwh),
            energy=record.energy,
            max_rounds=ctx.negotiation_rounds,
            negotiable=account.negotiable,
        )
    except SpbError as e:
        logger.warning("Negotiation with %s failed: %s", record.producer.hex()[:16], e.message)
        ctx.finish(record, TradeResult.REJECTED, ctx.net.now, e.code)
        return None
    record.negotiation_rounds = result.rounds
    if isinstance(result, AgreedPrice):
        record.agreed_price = result.price_per_kwh
        record.amount = result.price_per_kwh * record.energy
    else:
        ctx.finish(record, TradeResult.REJECTED, ctx.net.now, "NO_DEAL")
    return result


class Node:
    def __init__(self, node_id: str, ctx: SimContext):
        self.node_id = node_id
        self.ctx = ctx
        self.net = ctx.net
        self.handlers: Dict[type, Callable[[SimEvent], None]] = {}
        self.net.register(node_id, self.handle)

    def handle(self, event: SimEvent):
        if event.kind == TIMER:
            self.on_timer(event)
            return
        handler = self.handlers.get(type(event.payload))
        if handler is None:
            logger.debug("%s ignores %s", self.node_id, type(event.payload).__name__)
            return
        handler(event)

    def on_timer(self, event: SimEvent):
        pass

    def send_to_miner(self, payload):
        return self.net.unicast(self.node_id, self.ctx.miner_id, payload)


class ConsumerNode(Node):
    def __init__(self, node_id: str, ctx: SimContext, keypair: KeyPair):
        super().__init__(node_id, ctx)
        self.keypair = keypair
        self.address = keypair.address
        self.trades: Dict[Hash, PhaseMachine] = {}
        self._pending_starts: Dict[int, TradeRecord] = {}
        self._nonce = 0
        ctx.directory[self.address] = node_id
        ctx.parties[self.address] = NegotiationParty(keypair, node_id)
        self.handlers.update(
            {
                CtpAck: self._on_ctp_ack,
                ErcResult: self._on_erc_result,
                BlockAnnounce: self._on_block,
                TimeoutResult: self._on_timeout_result,
            }
        )

    @property
    def meter_id(self) -> Optional[str]:
        return self.ctx.meters.get(self.address)

    def schedule_trade(self, record: TradeRecord, start_at: int):
        self._pending_starts[record.index] = record
        self.net.set_timer(self.node_id, max(0, start_at - self.net.now), StartTrade(record.index))

    def _next_nonce(self) -> bytes:
        self._nonce += 1
        return digest(encode_fields([self.keypair.public_key, self._nonce]))[:NONCE_LENGTH]

    def commit(
        self,
        producer: bytes,
        amount: int,
        energy: int,
        ttl_ms: Optional[int] = None,
        record: Optional[TradeRecord] = None,
    ) -> Ctp:
        """Create, sign and send a CTP, then start its expiry timer."""
        now = self.net.now
        ttl = ttl_ms if ttl_ms is not None else self.ctx.ttl_ms
        ctp = make_ctp(self.keypair, producer, amount, energy, ttl, now, self._next_nonce())
        if record is None:
            record = self.ctx.add_record(
                TradeRecord(
                    index=0,
                    protocol="spb",
                    consumer=self.address,
                    producer=Address(bytes(producer)),
                    amount=amount,
                    energy=energy,
                    ttl_ms=ttl,
                )
            )
        record.started_at = now
        self.ctx.bind(record, ctp.id)
        self.trades[ctp.id] = PhaseMachine(
            CONSUMER_TRANSITIONS, ConsumerPhase.IDLE, f"consumer {ctp.id.hex()[:8]}"
        )
        self.ctx.step(ctp.id, 1, self.ctx.deployer_id or self.node_id, "deploy_contract", self.ctx.genesis_time)
        self.ctx.step(ctp.id, 2, self.node_id, "broadcast_ctp")
        self.send_to_miner(CtpSubmit(ctp))
        # Grace of two worst-case latencies so an ERC accepted before expiry is seen first
        self.net.set_timer(
            self.node_id, ttl + 2 * self.net.latency.max_delay, ExpiryTimer(ctp.id)
        )
        return ctp

    def phase(self, ctp_id: bytes) -> ConsumerPhase:
        return self.trades[bytes(ctp_id)].phase

    def on_timer(self, event: SimEvent):
        token = event.payload
        if isinstance(token, StartTrade):
            record = self._pending_starts.pop(token.index)
            if record.ceiling is None:
                self.commit(record.producer, record.amount, record.energy, record.ttl_ms, record)
                return
            result = negotiate_price(self.ctx, record)
            if isinstance(result, AgreedPrice):
                # The CTP leaves once the last negotiation message has arrived
                self._pending_starts[record.index] = record
                self.net.set_timer(self.node_id, result.elapsed_ms, PriceAgreed(record.index))
        elif isinstance(token, PriceAgreed):
            record = self._pending_starts.pop(token.index)
            self.commit(record.producer, record.amount, record.energy, record.ttl_ms, record)
        elif isinstance(token, ExpiryTimer):
            machine = self.trades.get(token.ctp_id)
            if machine is not None and machine.phase == ConsumerPhase.COMMITTED:
                machine.advance(ConsumerPhase.TIMED_OUT)
                self.ctx.step(token.ctp_id, 5, self.node_id, "timeout_request")
                self.send_to_miner(TimeoutRequest(token.ctp_id))

    def _on_ctp_ack(self, event: SimEvent):
        ack: CtpAck = event.payload
        machine = self.trades.get(ack.ctp_id)
        if machine is None:
            return
        record = self.ctx.record_for(ack.ctp_id)
        if ack.accepted:
            machine.advance(ConsumerPhase.COMMITTED)
            if self.meter_id is not None and record is not None:
                self.net.unicast(
                    self.node_id, self.meter_id, ExpectDelivery(ack.ctp_id, record.energy)
                )
        else:
            machine.advance(ConsumerPhase.REJECTED)
            logger.warning("CTP %s rejected: %s", ack.ctp_id.hex()[:16], ack.code)
            if record is not None:
                self.ctx.finish(record, TradeResult.REJECTED, self.net.now, ack.code)

    def _on_erc_result(self, event: SimEvent):
        result: ErcResult = event.payload
        machine = self.trades.get(result.ctp_id)
        if machine is None:
            return
        if result.accepted and machine.phase == ConsumerPhase.COMMITTED:
            machine.advance(ConsumerPhase.AWAITING_MINING)

    def _on_block(self, event: SimEvent):
        announce: BlockAnnounce = event.payload
        for ctp_id, tx_id in announce.settled:
            machine = self.trades.get(ctp_id)
            if machine is None:
                continue
            if machine.phase == ConsumerPhase.COMMITTED:
                # Block announcement overtook the ERC result
                machine.advance(ConsumerPhase.AWAITING_MINING)
            if machine.phase != ConsumerPhase.AWAITING_MINING:
                logger.warning(
                    "Settlement of %s seen in phase %s", ctp_id.hex()[:16], machine.phase.value
                )
                continue
            machine.advance(ConsumerPhase.DONE)
            record = self.ctx.record_for(ctp_id)
            if record is not None:
                record.tx_ids.append(tx_id)
                self.ctx.finish(record, TradeResult.SETTLED_PAID, announce.timestamp)

    def _on_timeout_result(self, event: SimEvent):
        result: TimeoutResult = event.payload
        machine = self.trades.get(result.ctp_id)
        if machine is None or machine.phase != ConsumerPhase.TIMED_OUT:
            return
        if not result.refunded:
            logger.warning(
                "Timeout request for %s refused: %s", result.ctp_id.hex()[:16], result.code
            )
            return
        machine.advance(ConsumerPhase.REFUNDED)
        self.ctx.step(result.ctp_id, 6, self.node_id, "refund")
        record = self.ctx.record_for(result.ctp_id)
        if record is not None:
            self.ctx.finish(record, TradeResult.EXPIRED_REFUNDED, self.net.now)


class ProducerNode(Node):
    def __init__(
        self,
        node_id: str,
        ctx: SimContext,
        keypair: KeyPair,
        reliable: bool = True,
        waits_for_commit: bool = True,
    ):
        super().__init__(node_id, ctx)
        self.keypair = keypair
        self.address = keypair.address
        self.reliable = reliable
        self.waits_for_commit = waits_for_commit
        self.trades: Dict[Hash, PhaseMachine] = {}
        ctx.directory[self.address] = node_id
        ctx.parties[self.address] = NegotiationParty(keypair, node_id)
        self.handlers.update(
            {CtpNotice: self._on_notice, BlockAnnounce: self._on_block}
        )

    def phase(self, ctp_id: bytes) -> ProducerPhase:
        return self.trades[bytes(ctp_id)].phase

    def _reliable_for(self, ctp_id: bytes) -> bool:
        record = self.ctx.record_for(ctp_id)
        return self.reliable if record is None else record.reliable

    def _on_notice(self, event: SimEvent):
        if not self.waits_for_commit:
            self._accept(event.payload.summary)

    def _on_block(self, event: SimEvent):
        announce: BlockAnnounce = event.payload
        if self.waits_for_commit:
            for summary in announce.new_ctps:
                if summary.producer == self.address:
                    self._accept(summary)
        for ctp_id, _ in announce.settled:
            machine = self.trades.get(ctp_id)
            if machine is not None and machine.can_advance(ProducerPhase.PAID):
                machine.advance(ProducerPhase.PAID)
        for ctp_id in announce.expired_ctp_ids:
            machine = self.trades.get(ctp_id)
            if machine is not None and machine.can_advance(ProducerPhase.UNPAID):
                machine.advance(ProducerPhase.UNPAID)

    def _accept(self, summary: CtpSummary):
        if summary.ctp_id in self.trades:
            return
        machine = PhaseMachine(
            PRODUCER_TRANSITIONS, ProducerPhase.IDLE, f"producer {summary.ctp_id.hex()[:8]}"
        )
        self.trades[summary.ctp_id] = machine
        machine.advance(ProducerPhase.NOTIFIED)
        self.ctx.step(summary.ctp_id, 3, self.node_id, "receive_ctp")
        self.transfer_energy(summary, self._reliable_for(summary.ctp_id))

    def transfer_energy(self, summary: CtpSummary, reliable: bool) -> Optional[SimEvent]:
        """Start the simulated delivery, or withhold it when unreliable."""
        machine = self.trades[summary.ctp_id]
        if not reliable:
            machine.advance(ProducerPhase.WITHHOLDING)
            self.ctx.step(summary.ctp_id, 4, self.node_id, "withhold_energy")
            return None
        machine.advance(ProducerPhase.TRANSFERRING)
        self.ctx.step(summary.ctp_id, 4, self.node_id, "transfer_energy")
        meter_id = self.ctx.meters.get(bytes(summary.consumer))
        if meter_id is None:
            logger.warning("No meter registered for consumer %s", summary.consumer.hex()[:16])
            return None
        return self.net.post(
            meter_id,
            EnergyDelivery(summary.ctp_id, summary.energy),
            self.ctx.transfer_latency_ms,
            source=self.node_id,
        )


def transfer_energy(producer: ProducerNode, ctp: Ctp, reliable: bool) -> Optional[SimEvent]:
    """Deliver (or withhold) the energy a CTP pays for."""
    summary = summarize(ctp)
    if summary.ctp_id not in producer.trades:
        machine = PhaseMachine(PRODUCER_TRANSITIONS, ProducerPhase.IDLE, "producer")
        machine.advance(ProducerPhase.NOTIFIED)
        producer.trades[summary.ctp_id] = machine
    return producer.transfer_energy(summary, reliable)


def summarize(ctp: Ctp) -> CtpSummary:
    return CtpSummary(
        ctp_id=ctp.id,
        consumer=ctp.consumer,
        producer=ctp.producer,
        amount=ctp.amount,
        energy=ctp.energy,
        expiry_time=ctp.expiry_time,
    )


class MeterNode(Node):
    def __init__(
        self,
        node_id: str,
        ctx: SimContext,
        identity: MeterIdentity,
        owner: bytes,
        auto_confirm: bool = True,
    ):
        """Smart meter of a consumer.

        Args:
            node_id: Network id of the meter
            ctx: Shared simulation context
            identity: Meter keys and Certificate of Existence
            owner: Address of the consumer the meter belongs to
            auto_confirm: Send the ERC as soon as a matching delivery arrives
        """
        super().__init__(node_id, ctx)
        self.identity = identity
        self.owner = Address(bytes(owner))
        self.auto_confirm = auto_confirm
        self.expected: Dict[Hash, int] = {}
        self.received: Dict[Hash, int] = {}
        self.trades: Dict[Hash, PhaseMachine] = {}
        self.sent: List[Erc] = []
        self.results: Dict[Hash, ErcResult] = {}
        ctx.meters[self.owner] = node_id
        self.handlers.update(
            {
                ExpectDelivery: self._on_expect,
                EnergyDelivery: self._on_delivery,
                ErcResult: self._on_erc_result,
            }
        )

    def _machine(self, ctp_id: Hash) -> PhaseMachine:
        if ctp_id not in self.trades:
            self.trades[ctp_id] = PhaseMachine(
                METER_TRANSITIONS, MeterPhase.IDLE, f"meter {ctp_id.hex()[:8]}"
            )
        return self.trades[ctp_id]

    def _on_expect(self, event: SimEvent):
        expect: ExpectDelivery = event.payload
        self.expected[expect.trade_id] = expect.energy
        machine = self._machine(expect.trade_id)
        if machine.can_advance(MeterPhase.EXPECTING):
            machine.advance(MeterPhase.EXPECTING)

    def _on_delivery(self, event: SimEvent):
        delivery: EnergyDelivery = event.payload
        machine = self._machine(delivery.trade_id)
        if not machine.can_advance(MeterPhase.RECEIVED):
            logger.warning("Unexpected delivery for %s", delivery.trade_id.hex()[:16])
            return
        machine.advance(MeterPhase.RECEIVED)
        self.received[delivery.trade_id] = delivery.energy
        expected = self.expected.get(delivery.trade_id)
        if self.auto_confirm and expected == delivery.energy:
            self.confirm(delivery.trade_id, delivery.energy)
        elif self.auto_confirm:
            logger.warning(
                "Delivery of %d kWh does not match the expected %s", delivery.energy, expected
            )

    def make_erc(self, ctp_id: bytes, energy_amount: int) -> Erc:
        try:
            return make_erc(self.identity, ctp_id, energy_amount)
        except ExhaustedKeys:
            signer = self.ctx.pick_signer(self.identity) if self.ctx.pick_signer else self.identity
            rebuild_tree(self.identity, signer)
            return make_erc(self.identity, ctp_id, energy_amount)

    def confirm(self, ctp_id: bytes, energy_amount: int) -> Erc:
        """Generate the ERC for a delivery and send it to the contract."""
        ctp_id = Hash(bytes(ctp_id))
        # No leaf key is spent on a trade that cannot be confirmed
        self._machine(ctp_id).advance(MeterPhase.CONFIRMING)
        erc = self.make_erc(ctp_id, energy_amount)
        self.sent.append(erc)
        self.ctx.step(ctp_id, 5, self.node_id, "generate_erc")
        self.send_to_miner(ErcSubmit(erc))
        return erc

    def _on_erc_result(self, event: SimEvent):
        result: ErcResult = event.payload
        self.results[result.ctp_id] = result
        machine = self.trades.get(result.ctp_id)
        if machine is None or machine.phase != MeterPhase.CONFIRMING:
            return
        machine.advance(MeterPhase.CONFIRMED if result.accepted else MeterPhase.REJECTED)


class ForgerNode(Node):
    """A non-meter that signs ERCs with a self-made certificate chain."""

    def __init__(self, node_id: str, ctx: SimContext, seed: bytes, leaf_count: int = 4):
        super().__init__(node_id, ctx)
        rogue_ca = Manufacturer(generate_keypair(digest(encode_fields([seed, "rogue-ca"]))))
        self.identity = create_meter(seed, rogue_ca, leaf_count)
        certify_meter(self.identity, self.identity)
        self.results: List[ErcResult] = []
        self.handlers.update({ErcResult: self._on_erc_result})

    def forge_erc(self, ctp_id: bytes, energy_amount: int) -> Erc:
        try:
            erc = make_erc(self.identity, ctp_id, energy_amount)
        except ExhaustedKeys:
            rebuild_tree(self.identity, self.identity)
            erc = make_erc(self.identity, ctp_id, energy_amount)
        self.send_to_miner(ErcSubmit(erc))
        return erc

    def _on_erc_result(self, event: SimEvent):
        self.results.append(event.payload)


#######################
# Drivers
#######################


@dataclass(frozen=True)
class TradeRequest:
    consumer: int
    producer: int
    amount: int
    energy: int
    start_at: int
    reliable: bool = True
    ttl_ms: Optional[int] = None
    ceiling: Optional[int] = None


def outcome_of(world: "World", record: TradeRecord) -> TradeOutcome:
    """Build the outcome of a trade from the chain's point of view.

    A trade the consumer has not closed is reported as unfinished, never as
    refunded, whatever the CTP database holds for it.
    """
    mined = [tx_id for tx_id in record.tx_ids if world.chain.inclusion_height(tx_id) is not None]
    result = record.result if record.result is not None else TradeResult.UNFINISHED
    delay = None
    if record.completed_at is not None and record.started_at is not None:
        delay = record.completed_at - record.started_at
        if result == TradeResult.SETTLED_PAID:
            # Physical transfer time is not part of the protocol delay
            delay -= world.config.transfer_latency_ms
    return TradeOutcome(
        index=record.index,
        protocol=record.protocol,
        ctp_id=record.trade_id.hex() if record.trade_id else "",
        result=result,
        consumer_fee_paid=len(mined) * world.chain.fee,
        producer_received=record.amount if result == TradeResult.SETTLED_PAID else 0,
        e2e_delay_ms=delay,
        onchain_tx_count=len(mined),
        started_at=record.started_at if record.started_at is not None else 0,
        completed_at=record.completed_at,
        reliable=record.reliable,
    )


def run_batch(
    world: "World",
    requests: Sequence[TradeRequest],
    horizon_ms: Optional[int] = None,
) -> List[TradeOutcome]:
    """Schedule every request, run until all trades finish, and report them."""
    records = []
    for request in requests:
        consumer = world.consumers[request.consumer]
        producer_address = world.producer_address(request.producer)
        record = world.ctx.add_record(
            TradeRecord(
                index=0,
                protocol=world.protocol,
                consumer=consumer.address,
                producer=producer_address,
                amount=request.amount,
                energy=request.energy,
                reliable=request.reliable,
                ttl_ms=request.ttl_ms,
                ceiling=request.ceiling,
            )
        )
        consumer.schedule_trade(record, request.start_at)
        records.append(record)

    if horizon_ms is None:
        last_start = max((r.start_at for r in requests), default=world.net.now)
        horizon_ms = last_start + world.drain_budget_ms(len(requests))
    world.net.run_while(lambda: not all(r.done for r in records), horizon_ms)
    unfinished = [r.index for r in records if not r.done]
    if unfinished:
        logger.warning("%d trades did not finish before t=%d", len(unfinished), horizon_ms)
    return [outcome_of(world, r) for r in records]


def run_trade(
    world: "World",
    consumer: int = 0,
    producer: int = 0,
    reliable: bool = True,
    amount: Optional[int] = None,
    energy: Optional[int] = None,
    ttl_ms: Optional[int] = None,
    start_at: Optional[int] = None,
    ceiling: Optional[int] = None,
) -> TradeOutcome:
    """Run one trade to completion on a freshly built world."""
    request = TradeRequest(
        consumer=consumer,
        producer=producer,
        amount=amount if amount is not None else world.config.trade_amount,
        energy=energy if energy is not None else world.config.trade_energy,
        start_at=start_at if start_at is not None else world.net.now,
        reliable=reliable,
        ttl_ms=ttl_ms,
        ceiling=ceiling,
    )
    return run_batch(world, [request])[0]
