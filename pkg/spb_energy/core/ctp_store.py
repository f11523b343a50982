"""The miner's off-chain CTP database.

Records are content addressed: a CTP id is the digest of the signed CTP, so a
consumer-chosen nonce doubles as replay protection. The database digest is
committed in every block header; an append-only journal with one mark per
block lets a verifier replay the database and re-derive each commitment.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Protocol, Tuple

from spb_energy.core.codec import encode_field, encode_fields
from spb_energy.core.constants import DEFAULT_TX_FEE
from spb_energy.core.crypto import (
    Address,
    Hash,
    PublicKey,
    Signature,
    derive_address,
    digest,
    sign,
    verify,
)
from spb_energy.core.exceptions import (
    AlreadySettled,
    BadSignature,
    CtpExpired,
    CtpNotExpired,
    CtpNotFound,
    DuplicateCtp,
    InsufficientFunds,
    InvalidCtp,
)
from spb_energy.core.simchain import Ledger

logger = logging.getLogger(__name__)


class CtpStatus(Enum):
    PENDING = "pending"
    SETTLED = "settled"
    EXPIRED = "expired"


@dataclass(frozen=True)
class Ctp:
    consumer: Address
    producer: Address
    amount: int
    energy: int
    expiry_time: int
    nonce: bytes
    consumer_pk: PublicKey
    consumer_sig: Signature = Signature(b"")

    def signing_payload(self) -> bytes:
        return encode_fields(
            [
                "ctp",
                self.consumer,
                self.producer,
                self.amount,
                self.energy,
                self.expiry_time,
                self.nonce,
                self.consumer_pk,
            ]
        )

    def canonical(self) -> bytes:
        return self.signing_payload() + encode_field(self.consumer_sig)

    @property
    def id(self) -> Hash:
        return digest(self.canonical())

    def signed(self, secret_key: bytes) -> "Ctp":
        return replace(self, consumer_sig=sign(self.signing_payload(), secret_key))

    def verify_signature(self) -> bool:
        return derive_address(self.consumer_pk) == self.consumer and verify(
            self.signing_payload(), self.consumer_sig, self.consumer_pk
        )


@dataclass
class CtpRecord:
    id: Hash
    ctp: Ctp
    status: CtpStatus
    created_at: int
    closed_at: Optional[int] = None
    paid: bool = False

    def canonical(self) -> bytes:
        return encode_fields([self.id, self.ctp.canonical(), self.status.value])

    @property
    def holds_funds(self) -> bool:
        return self.status == CtpStatus.PENDING or (
            self.status == CtpStatus.SETTLED and not self.paid
        )


class EnergyInventory(Protocol):
    def reserve(self, producer: bytes, energy: int): ...

    def release(self, producer: bytes, energy: int): ...


def hash_records(records: Iterable[Tuple[bytes, bytes, str]]) -> Hash:
    """Digest over (id, ctp canonical, status) triples sorted by id."""
    ordered = sorted(records, key=lambda r: r[0])
    return digest(
        b"".join(encode_fields([rid, ctp_bytes, status]) for rid, ctp_bytes, status in ordered)
    )


class CtpStore:
    def __init__(
        self,
        ledger: Ledger,
        inventory: Optional[EnergyInventory] = None,
        fee: int = DEFAULT_TX_FEE,
    ):
        """Initialize an empty CTP database.

        Args:
            ledger: Ledger whose balances back the holds
            inventory: Energy book that reserves the producer's energy
            fee: Per-transaction fee every settlement will cost the consumer
        """
        self.ledger = ledger
        self.inventory = inventory
        self.fee = fee
        self.records: Dict[Hash, CtpRecord] = {}
        # ("insert", id, ctp canonical) or ("status", id, status value)
        self.journal: List[Tuple[str, Hash, object]] = []
        self.marks: Dict[int, int] = {}
        self._uncommitted: List[Hash] = []

    def __len__(self) -> int:
        return len(self.records)

    def get(self, ctp_id: bytes) -> CtpRecord:
        try:
            return self.records[bytes(ctp_id)]
        except KeyError:
            raise CtpNotFound(f"No CTP {bytes(ctp_id).hex()}") from None

    def unpaid_count(self, consumer: bytes) -> int:
        """Records of ``consumer`` whose SettledCtp fee may still be charged."""
        return sum(
            1
            for r in self.records.values()
            if r.ctp.consumer == bytes(consumer) and r.holds_funds
        )

    def held_total(self, consumer: Optional[bytes] = None) -> int:
        """Funds the database keeps on hold (all consumers when None)."""
        return sum(
            r.ctp.amount
            for r in self.records.values()
            if r.holds_funds and (consumer is None or r.ctp.consumer == bytes(consumer))
        )

    def _set_status(self, record: CtpRecord, status: CtpStatus, now: int):
        record.status = status
        record.closed_at = now
        self.journal.append(("status", record.id, status.value))

    def insert_ctp(self, ctp: Ctp, now: int) -> Hash:
        """Validate a CTP, hold the funds and reserve the energy.

        Returns
        -------
            Content-addressed CTP id
        """
        if ctp.amount <= 0 or ctp.energy <= 0:
            raise InvalidCtp("CTP amount and energy must be positive")
        if ctp.expiry_time <= now:
            raise InvalidCtp(f"CTP expiry {ctp.expiry_time} is not after now={now}")
        if not ctp.verify_signature():
            raise BadSignature("CTP signature does not verify under the consumer key")
        ctp_id = ctp.id
        if ctp_id in self.records:
            raise DuplicateCtp(f"CTP {ctp_id.hex()} already recorded")

        account = self.ledger.account(ctp.consumer)
        required = ctp.amount + self.fee * (self.unpaid_count(ctp.consumer) + 1)
        if account.available < required:
            raise InsufficientFunds(
                f"Consumer has {account.available}, CTP needs {required} including fees"
            )
        if self.inventory is not None:
            self.inventory.reserve(ctp.producer, ctp.energy)
        self.ledger.hold_funds(ctp.consumer, ctp.amount)

        self.records[ctp_id] = CtpRecord(
            id=ctp_id, ctp=ctp, status=CtpStatus.PENDING, created_at=now
        )
        self.journal.append(("insert", ctp_id, ctp.canonical()))
        self._uncommitted.append(ctp_id)
        logger.debug("Inserted CTP %s (amount %d)", ctp_id.hex()[:16], ctp.amount)
        return ctp_id

    def db_hash(self) -> Hash:
        return hash_records(
            (r.id, r.ctp.canonical(), r.status.value) for r in self.records.values()
        )

    def take_for_settlement(self, ctp_id: bytes, now: int) -> CtpRecord:
        """Move a Pending, unexpired record to Settled."""
        record = self.get(ctp_id)
        if record.status == CtpStatus.SETTLED:
            raise AlreadySettled(f"CTP {record.id.hex()} is already settled")
        if record.status == CtpStatus.EXPIRED or now >= record.ctp.expiry_time:
            raise CtpExpired(f"CTP {record.id.hex()} expired at {record.ctp.expiry_time}")
        self._set_status(record, CtpStatus.SETTLED, now)
        return record

    def _expire(self, record: CtpRecord, now: int):
        self._set_status(record, CtpStatus.EXPIRED, now)
        self.ledger.release_hold(record.ctp.consumer, record.ctp.amount)
        if self.inventory is not None:
            self.inventory.release(record.ctp.producer, record.ctp.energy)
        logger.debug("Expired CTP %s, refunded %d", record.id.hex()[:16], record.ctp.amount)

    def sweep_expired(self, now: int) -> List[Hash]:
        expired = []
        for ctp_id in sorted(self.records):
            record = self.records[ctp_id]
            if record.status == CtpStatus.PENDING and record.ctp.expiry_time <= now:
                self._expire(record, now)
                expired.append(ctp_id)
        return expired

    def timeout_request(self, ctp_id: bytes, now: int) -> CtpRecord:
        """Honour a consumer's timeout request for a genuinely expired CTP.

        A record the sweep already expired is returned unchanged.
        """
        record = self.get(ctp_id)
        if record.status == CtpStatus.SETTLED:
            raise AlreadySettled(f"CTP {record.id.hex()} was settled")
        if record.status == CtpStatus.PENDING:
            if now < record.ctp.expiry_time:
                raise CtpNotExpired(
                    f"CTP {record.id.hex()} expires at {record.ctp.expiry_time}, now={now}"
                )
            self._expire(record, now)
        return record

    def mark_paid(self, ctp_id: bytes):
        self.get(ctp_id).paid = True

    def mark(self, height: int) -> List[Hash]:
        """Record the journal position committed by block ``height``.

        Returns
        -------
            Ids inserted since the previous mark
        """
        self.marks[height] = len(self.journal)
        committed, self._uncommitted = self._uncommitted, []
        return committed

    def replay_hash(self, height: int) -> Optional[Hash]:
        """Rebuild the database from the journal up to a block's mark."""
        if height not in self.marks:
            return None
        state: Dict[bytes, List] = {}
        for op, ctp_id, value in self.journal[: self.marks[height]]:
            if op == "insert":
                state[ctp_id] = [value, CtpStatus.PENDING.value]
            else:
                state[ctp_id][1] = value
        return hash_records((rid, ctp_bytes, status) for rid, (ctp_bytes, status) in state.items())
