"""Topology builder: one miner, consumers with meters, producers, and the overlay."""

import logging
import math
import random
from dataclasses import dataclass, field
from typing import List, Optional, Union

from spb_energy.core.baseline import BaselineConsumerNode, BaselineContract, BaselineProducerNode
from spb_energy.core.coe import Manufacturer, MeterIdentity, certify_meter, create_meter
from spb_energy.core.config import ExperimentConfig
from spb_energy.core.constants import (
    CONSUMER_PREFIX,
    METER_PREFIX,
    MINER_NODE,
    PRODUCER_PREFIX,
)
from spb_energy.core.crypto import Address, KeyPair, derive_seed, generate_keypair
from spb_energy.core.ctp_store import CtpStore
from spb_energy.core.energy_market import (
    AuthorityProvenance,
    Burn,
    EnergyAccount,
    EnergyBook,
    EnergyMarket,
    contract_deploy_tx,
    issue_authority_cert,
)
from spb_energy.core.miner import MinerNode
from spb_energy.core.overlay import Overlay, static_partition
from spb_energy.core.simchain import Blockchain, ChainVerdict, Ledger, validate_chain
from spb_energy.core.simnet import LatencyModel, SimNetwork
from spb_energy.core.trade_protocol import ConsumerNode, MeterNode, ProducerNode, SimContext

logger = logging.getLogger(__name__)

# On-chain transactions a trade needs, per protocol
TXS_PER_TRADE = {"spb": 1, "baseline": 3}


@dataclass
class World:
    config: ExperimentConfig
    protocol: str
    net: SimNetwork
    ctx: SimContext
    ledger: Ledger
    book: EnergyBook
    chain: Blockchain
    miner: MinerNode
    manufacturer: Manufacturer
    authority: KeyPair
    overlay: Overlay
    store: Optional[CtpStore] = None
    market: Optional[EnergyMarket] = None
    contract: Optional[BaselineContract] = None
    consumers: List[Union[ConsumerNode, BaselineConsumerNode]] = field(default_factory=list)
    producers: List[Union[ProducerNode, BaselineProducerNode]] = field(default_factory=list)
    meters: List[MeterNode] = field(default_factory=list)
    initial_supply: int = 0
    ready_at: int = 0

    def producer_address(self, index: int) -> Address:
        return self.producers[index].address

    def consumer_address(self, index: int) -> Address:
        return self.consumers[index].address

    def drain_budget_ms(self, trade_count: int) -> int:
        """Simulated time that comfortably finishes ``trade_count`` queued trades."""
        cfg = self.config
        blocks = math.ceil(trade_count * TXS_PER_TRADE[self.protocol] / cfg.block_capacity)
        return (
            cfg.ttl_ms
            + cfg.transfer_latency_ms
            + 4 * self.net.latency.max_delay
            + cfg.mining_period_ms * (blocks + TXS_PER_TRADE[self.protocol] + 2)
        )

    def validate(self) -> ChainVerdict:
        return validate_chain(self.chain, self.store.replay_hash if self.store else None)

    def settle_setup(self) -> int:
        """Mine the setup transactions (energy postings) before any trade."""
        horizon = self.net.now + self.config.mining_period_ms * (
            len(self.chain.mempool) // self.config.block_capacity + 2
        )
        self.net.run_while(lambda: bool(self.chain.mempool), horizon)
        self.ready_at = self.net.now
        return self.ready_at


def _keypair(seed: int, label: str) -> KeyPair:
    return generate_keypair(derive_seed(seed, label))


def build_world(
    config: ExperimentConfig,
    protocol: Optional[str] = None,
    auto_confirm: bool = True,
    settle: bool = True,
) -> World:
    """Build a deterministic world for one run.

    Args:
        config: Experiment configuration
        protocol: "spb" or "baseline"; defaults to ``config.protocol``
        auto_confirm: Meters send the ERC as soon as a delivery matches
        settle: Mine the setup transactions before returning

    Returns
    -------
        World ready for trades at ``world.ready_at``
    """
    protocol = protocol or config.protocol
    if protocol not in TXS_PER_TRADE:
        raise ValueError(f"Unknown protocol '{protocol}'")
    seed = config.seed
    net = SimNetwork(
        LatencyModel(config.latency_base_ms, config.latency_jitter_ms),
        random.Random(seed),
    )

    manufacturer = Manufacturer(_keypair(seed, "manufacturer"))
    authority = _keypair(seed, "authority")
    miner_keys = _keypair(seed, "miner")
    consumer_keys = [_keypair(seed, f"{CONSUMER_PREFIX}-{i}") for i in range(config.consumers)]
    producer_keys = [_keypair(seed, f"{PRODUCER_PREFIX}-{i}") for i in range(config.producers)]

    ledger = Ledger()
    for keypair in consumer_keys + producer_keys:
        ledger.create_account(keypair.address, config.initial_balance)
    book = EnergyBook()

    ctx = SimContext(
        net=net,
        miner_id=MINER_NODE,
        manufacturer_pk=manufacturer.public_key,
        fee=config.tx_fee,
        ttl_ms=config.ttl_ms,
        transfer_latency_ms=config.transfer_latency_ms,
        deployer_id=f"{CONSUMER_PREFIX}-0",
        overlay=Overlay(static_partition(config.prefix_bits), net),
        book=book,
        opening_bid_pct=config.opening_bid_pct,
        negotiation_rounds=config.negotiation_rounds,
    )

    store = market = contract = None
    if protocol == "spb":
        store = CtpStore(ledger, book, config.tx_fee)
        deploy = contract_deploy_tx(
            consumer_keys[0].address, config.tx_fee, config.size_contract_deploy
        )
        chain = Blockchain(
            ledger,
            miner_keys.address,
            config.block_capacity,
            config.tx_fee,
            genesis_txs=[deploy],
            genesis_ctp_db_hash=store.db_hash(),
        )
        market = EnergyMarket(
            chain,
            store,
            book,
            manufacturer.public_key,
            authority.public_key,
            config.tx_sizes,
            config.burn_amount,
        )
    else:
        chain = Blockchain(ledger, miner_keys.address, config.block_capacity, config.tx_fee)
        contract = BaselineContract(chain, book, config.tx_sizes)

    miner = MinerNode(
        MINER_NODE,
        ctx,
        chain,
        config.mining_period_ms,
        store=store,
        market=market,
        notify_producers=protocol == "spb" and not config.producer_waits_for_commit,
    )
    world = World(
        config=config,
        protocol=protocol,
        net=net,
        ctx=ctx,
        ledger=ledger,
        book=book,
        chain=chain,
        miner=miner,
        manufacturer=manufacturer,
        authority=authority,
        overlay=ctx.overlay,
        store=store,
        market=market,
        contract=contract,
    )

    for i, keypair in enumerate(producer_keys):
        node_id = f"{PRODUCER_PREFIX}-{i}"
        if protocol == "spb":
            world.producers.append(
                ProducerNode(node_id, ctx, keypair, waits_for_commit=config.producer_waits_for_commit)
            )
            # Alternate the two ways of opening an energy account
            mode = Burn() if i % 2 == 0 else issue_authority_cert(keypair.address, authority.secret_key)
            market.create_energy_account(
                keypair.address,
                mode,
                config.price_per_kwh,
                negotiable=config.negotiable_producers,
                floor_price=config.floor_price_per_kwh,
            )
            market.add_energy(keypair.address, config.initial_energy)
        else:
            world.producers.append(BaselineProducerNode(node_id, ctx, keypair))
            book.accounts[keypair.address] = EnergyAccount(
                owner=keypair.address,
                energy_available=config.initial_energy,
                energy_reserved=0,
                price_per_kwh=config.price_per_kwh,
                provenance=AuthorityProvenance(
                    issue_authority_cert(keypair.address, authority.secret_key).signature
                ),
            )
        world.overlay.register(keypair.public_key, node_id)

    identities: List[MeterIdentity] = []
    for i, keypair in enumerate(consumer_keys):
        node_id = f"{CONSUMER_PREFIX}-{i}"
        if protocol == "spb":
            world.consumers.append(ConsumerNode(node_id, ctx, keypair))
            identities.append(
                create_meter(derive_seed(seed, f"{METER_PREFIX}-{i}"), manufacturer, config.merkle_leaves)
            )
        else:
            world.consumers.append(BaselineConsumerNode(node_id, ctx, keypair, contract))
        world.overlay.register(keypair.public_key, node_id)

    if identities:
        signer_rng = random.Random(f"{seed}:signers")

        def pick_signer(meter: MeterIdentity) -> MeterIdentity:
            peers = [m for m in identities if m is not meter] or [meter]
            return signer_rng.choice(peers)

        ctx.pick_signer = pick_signer
        for i, identity in enumerate(identities):
            certify_meter(identity, pick_signer(identity))
            world.meters.append(
                MeterNode(
                    f"{METER_PREFIX}-{i}",
                    ctx,
                    identity,
                    consumer_keys[i].address,
                    auto_confirm=auto_confirm,
                )
            )

    world.initial_supply = ledger.total_supply()
    miner.start()
    if settle:
        world.settle_setup()
    logger.debug(
        "Built %s world: %d consumers, %d producers, ready at t=%d",
        protocol,
        len(world.consumers),
        len(world.producers),
        world.ready_at,
    )
    return world
