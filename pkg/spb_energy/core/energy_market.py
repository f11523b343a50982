"""Energy-market contract logic.

Producers open energy accounts (by burning coins or with an authority
certificate), post energy with a price, and get paid when a consumer's meter
confirms receipt with an ERC that matches a pending CTP. The ERC itself never
reaches the chain; only the resulting SettledCtp transaction does.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Union

from spb_energy.core.codec import encode_fields
from spb_energy.core.constants import (
    BURN_ADDRESS,
    DEFAULT_BURN_AMOUNT,
    DEFAULT_PRICE_PER_KWH,
    DEFAULT_TX_SIZES,
)
from spb_energy.core.crypto import Address, Hash, Signature, digest, sign, verify
from spb_energy.core.ctp_store import CtpStatus, CtpStore
from spb_energy.core.coe import verify_coe
from spb_energy.core.exceptions import (
    AccountExists,
    AlreadySettled,
    BadAuthoritySignature,
    BadCoE,
    BadMeterSignature,
    CtpExpired,
    EnergyMismatch,
    InsufficientEnergy,
    NoAccount,
    NonPositiveAmount,
)
from spb_energy.core.simchain import (
    Block,
    Blockchain,
    Ledger,
    Transaction,
    TxKind,
    TxRule,
    make_transaction,
)

if TYPE_CHECKING:
    from spb_energy.core.trade_protocol import Erc

logger = logging.getLogger(__name__)


#######################
# Accounts and offers
#######################


@dataclass(frozen=True)
class Burn:
    amount: Optional[int] = None


@dataclass(frozen=True)
class AuthorityCert:
    signature: Signature


@dataclass(frozen=True)
class BurnProvenance:
    burn_id: Hash
    amount: int


@dataclass(frozen=True)
class AuthorityProvenance:
    signature: Signature


Provenance = Union[BurnProvenance, AuthorityProvenance]


@dataclass
class EnergyAccount:
    owner: Address
    energy_available: int
    energy_reserved: int
    price_per_kwh: int
    provenance: Provenance
    negotiable: bool = False
    floor_price: Optional[int] = None


@dataclass(frozen=True)
class Offer:
    producer: Address
    energy: int
    price_per_kwh: int
    negotiable: bool = False


@dataclass
class Settlement:
    ctp_id: Hash
    amount: int
    producer: Address
    settled_at: int
    tx_id: Hash
    mined_at: Optional[int] = None


def authority_message(owner: bytes) -> bytes:
    return encode_fields(["energy-account", owner])


def issue_authority_cert(owner: bytes, authority_secret_key: bytes) -> AuthorityCert:
    """Sign an energy-account certificate the way an energy company would."""
    return AuthorityCert(signature=sign(authority_message(owner), authority_secret_key))


class EnergyBook:
    """Energy accounts and their reservations."""

    def __init__(self):
        self.accounts: Dict[Address, EnergyAccount] = {}

    def account(self, owner: bytes) -> EnergyAccount:
        try:
            return self.accounts[bytes(owner)]
        except KeyError:
            raise NoAccount(f"No energy account for {bytes(owner).hex()}") from None

    def reserve(self, producer: bytes, energy: int):
        account = self.account(producer)
        if account.energy_available < energy:
            raise InsufficientEnergy(
                f"Producer has {account.energy_available} kWh, {energy} requested"
            )
        account.energy_available -= energy
        account.energy_reserved += energy

    def release(self, producer: bytes, energy: int):
        account = self.account(producer)
        account.energy_reserved -= energy
        account.energy_available += energy

    def consume(self, producer: bytes, energy: int):
        self.account(producer).energy_reserved -= energy

    def total_energy(self, producer: bytes) -> int:
        account = self.account(producer)
        return account.energy_available + account.energy_reserved

    def query_offers(self, min_energy: int = 0, max_price: Optional[int] = None) -> List[Offer]:
        """Offers with enough unreserved energy, cheapest first.

        Ties on price are broken by producer address.
        """
        offers = [
            Offer(
                producer=account.owner,
                energy=account.energy_available,
                price_per_kwh=account.price_per_kwh,
                negotiable=account.negotiable,
            )
            for account in self.accounts.values()
            if account.energy_available > 0
            and account.energy_available >= min_energy
            and (max_price is None or account.price_per_kwh <= max_price)
        ]
        return sorted(offers, key=lambda o: (o.price_per_kwh, bytes(o.producer)))


#######################
# Contract
#######################


def contract_deploy_tx(deployer: bytes, fee: int, size: int) -> Transaction:
    """The one-time market contract deployment, placed in genesis."""
    return make_transaction(
        TxKind.CONTRACT_DEPLOY,
        deployer,
        {"contract": "spb-energy-market"},
        fee,
        target_size=size,
    )


def _no_effect(ledger: Ledger, tx: Transaction):
    pass


def _no_deltas(tx: Transaction) -> Dict[bytes, int]:
    return {}


class EnergyMarket:
    def __init__(
        self,
        chain: Blockchain,
        store: CtpStore,
        book: EnergyBook,
        manufacturer_pk: bytes,
        authority_pk: bytes,
        tx_sizes: Optional[Dict[str, int]] = None,
        burn_amount: int = DEFAULT_BURN_AMOUNT,
    ):
        """Bind the market contract to a chain and register its transaction rules.

        Args:
            chain: Chain the contract lives on
            store: Miner's CTP database
            book: Energy accounts
            manufacturer_pk: CA key for Certificates of Existence
            authority_pk: Key of the authority certifying energy accounts
            tx_sizes: Calibrated transaction sizes in bytes
            burn_amount: Default coin burn for account creation
        """
        self.chain = chain
        self.ledger = chain.ledger
        self.store = store
        self.book = book
        self.manufacturer_pk = bytes(manufacturer_pk)
        self.authority_pk = bytes(authority_pk)
        self.tx_sizes = dict(DEFAULT_TX_SIZES, **(tx_sizes or {}))
        self.burn_amount = burn_amount
        self.settlements: Dict[Hash, Settlement] = {}
        self.settled_listeners: List[Callable[[Settlement, Block], None]] = []
        self._posts = 0

        chain.register_rule(TxKind.CONTRACT_DEPLOY, TxRule(_no_effect, _no_deltas))
        chain.register_rule(TxKind.ENERGY_ADD, TxRule(_no_effect, _no_deltas))
        chain.register_rule(
            TxKind.SETTLED_CTP,
            TxRule(self._apply_settled, self._settled_deltas, self._on_settled_mined),
        )

    def create_energy_account(
        self,
        owner: bytes,
        mode: Union[Burn, AuthorityCert],
        price_per_kwh: int = DEFAULT_PRICE_PER_KWH,
        negotiable: bool = False,
        floor_price: Optional[int] = None,
    ) -> EnergyAccount:
        """Open an energy account by coin burn or authority certificate."""
        owner = Address(bytes(owner))
        if owner in self.book.accounts:
            raise AccountExists(f"Energy account for {owner.hex()} already exists")
        if isinstance(mode, Burn):
            burned = self.burn_amount if mode.amount is None else mode.amount
            self.ledger.burn(owner, burned)
            self.chain.record_offchain("burn", {owner: -burned, BURN_ADDRESS: burned})
            provenance: Provenance = BurnProvenance(
                burn_id=digest(encode_fields(["burn", owner, burned])),
                amount=burned,
            )
        else:
            if not verify(authority_message(owner), mode.signature, self.authority_pk):
                raise BadAuthoritySignature(
                    f"Certificate for {owner.hex()} is not signed by the authority"
                )
            provenance = AuthorityProvenance(signature=mode.signature)
        account = EnergyAccount(
            owner=owner,
            energy_available=0,
            energy_reserved=0,
            price_per_kwh=price_per_kwh,
            provenance=provenance,
            negotiable=negotiable,
            floor_price=floor_price,
        )
        self.book.accounts[owner] = account
        logger.debug("Opened energy account for %s", owner.hex()[:16])
        return account

    def add_energy(
        self, producer: bytes, amount: int, price_per_kwh: Optional[int] = None
    ) -> Transaction:
        """Post energy for sale; the posting is an EnergyAdd transaction."""
        account = self.book.account(producer)
        if amount <= 0:
            raise NonPositiveAmount(f"Energy amount must be positive, got {amount}")
        if price_per_kwh is not None:
            if price_per_kwh <= 0:
                raise NonPositiveAmount(f"Price must be positive, got {price_per_kwh}")
            account.price_per_kwh = price_per_kwh
        tx = make_transaction(
            TxKind.ENERGY_ADD,
            producer,
            {"energy": amount, "price_per_kwh": account.price_per_kwh},
            self.chain.fee,
            target_size=self.tx_sizes[TxKind.ENERGY_ADD.value],
            nonce=self._posts,
        )
        self._posts += 1
        self.chain.submit_transaction(tx)
        account.energy_available += amount
        return tx

    def query_offers(self, min_energy: int = 0, max_price: Optional[int] = None) -> List[Offer]:
        return self.book.query_offers(min_energy, max_price)

    def settle_erc(self, erc: "Erc", now: int) -> Settlement:
        """Verify an ERC against its CTP and queue the SettledCtp transaction.

        Raises
        ------
            BadCoE, BadMeterSignature, CtpNotFound, AlreadySettled, CtpExpired,
            EnergyMismatch
        """
        if not verify_coe(erc.coe, erc.leaf_pk, erc.proof, self.manufacturer_pk):
            raise BadCoE(f"ERC for {bytes(erc.ctp_id).hex()[:16]} carries an invalid CoE")
        if not verify(erc.message(), erc.meter_sig, erc.leaf_pk):
            raise BadMeterSignature("ERC signature does not verify under the leaf key")
        record = self.store.get(erc.ctp_id)
        if record.status == CtpStatus.SETTLED:
            raise AlreadySettled(f"CTP {record.id.hex()} is already settled")
        if record.status == CtpStatus.EXPIRED or now >= record.ctp.expiry_time:
            raise CtpExpired(f"CTP {record.id.hex()} expired at {record.ctp.expiry_time}")
        if erc.energy_amount != record.ctp.energy:
            raise EnergyMismatch(
                f"ERC confirms {erc.energy_amount} kWh, CTP covers {record.ctp.energy}"
            )

        self.store.take_for_settlement(record.id, now)
        ctp = record.ctp
        tx = make_transaction(
            TxKind.SETTLED_CTP,
            ctp.consumer,
            {
                "ctp_id": record.id,
                "producer": ctp.producer,
                "amount": ctp.amount,
                "energy": ctp.energy,
            },
            self.chain.fee,
            target_size=self.tx_sizes[TxKind.SETTLED_CTP.value],
        )
        self.chain.submit_transaction(tx)
        self.book.consume(ctp.producer, ctp.energy)
        settlement = Settlement(
            ctp_id=record.id,
            amount=ctp.amount,
            producer=ctp.producer,
            settled_at=now,
            tx_id=tx.id,
        )
        self.settlements[record.id] = settlement
        logger.debug("Accepted ERC for CTP %s", record.id.hex()[:16])
        return settlement

    def _apply_settled(self, ledger: Ledger, tx: Transaction):
        ledger.capture_hold(tx.sender, tx.field("producer"), tx.field("amount"))

    def _settled_deltas(self, tx: Transaction) -> Dict[bytes, int]:
        amount = tx.field("amount")
        return {bytes(tx.sender): -amount, bytes(tx.field("producer")): amount}

    def _on_settled_mined(self, tx: Transaction, block: Block):
        ctp_id = Hash(bytes(tx.field("ctp_id")))
        self.store.mark_paid(ctp_id)
        settlement = self.settlements[ctp_id]
        settlement.mined_at = block.header.timestamp
        for listener in self.settled_listeners:
            listener(settlement, block)
