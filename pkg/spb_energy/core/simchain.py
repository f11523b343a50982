"""Simulated account-model blockchain.

A single miner collects transactions in a FIFO mempool and seals them into a
block every mining period. Each block header commits to the miner's CTP
database digest. Contract modules plug their transaction semantics in through
``TxRule`` objects registered per transaction kind.
"""

import json
import logging
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Callable, Deque, Dict, Iterable, List, Mapping, Optional, Tuple

from spb_energy.core.codec import Field, encode_field, encode_fields
from spb_energy.core.constants import (
    BURN_ADDRESS,
    DEFAULT_BLOCK_CAPACITY,
    DEFAULT_TX_FEE,
    ZERO_HASH,
)
from spb_energy.core.crypto import Address, Hash, digest
from spb_energy.core.exceptions import (
    DuplicateTx,
    InsufficientFunds,
    InsufficientHold,
    SpbError,
    UnknownAccount,
)
from spb_energy.core.merkle import build_merkle_tree

logger = logging.getLogger(__name__)


class TxKind(Enum):
    CONTRACT_DEPLOY = "contract_deploy"
    ENERGY_ADD = "energy_add"
    SETTLED_CTP = "settled_ctp"
    BASELINE_DEPLOY = "baseline_deploy"
    BASELINE_PAY_IN = "baseline_pay_in"
    BASELINE_CONFIRM_PAYOUT = "baseline_confirm_payout"


#######################
# Transactions
#######################


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    sender: Address
    body: Tuple[Tuple[str, Field], ...]
    fee: int
    nonce: int = 0
    padding: int = 0

    def _unpadded(self) -> bytes:
        fields: List[Field] = [self.kind.value, self.sender, self.fee, self.nonce]
        for name, value in self.body:
            fields.extend([name, value])
        return encode_fields(fields)

    def canonical(self) -> bytes:
        return self._unpadded() + encode_field(bytes(self.padding))

    @cached_property
    def id(self) -> Hash:
        return digest(self.canonical())

    @cached_property
    def byte_size(self) -> int:
        return len(self.canonical())

    def field(self, name: str) -> Field:
        for key, value in self.body:
            if key == name:
                return value
        raise KeyError(name)


def make_transaction(
    kind: TxKind,
    sender: bytes,
    body: Mapping[str, Field],
    fee: int,
    target_size: int = 0,
    nonce: int = 0,
) -> Transaction:
    """Build a transaction padded so its canonical size is ``target_size``.

    The calibrated sizes stand in for contract bytecode and call data that the
    simulator does not model. A target smaller than the content is ignored.
    """
    tx = Transaction(
        kind=kind,
        sender=Address(bytes(sender)),
        body=tuple(body.items()),
        fee=fee,
        nonce=nonce,
    )
    # 4 bytes of length prefix for the padding field itself
    padding = max(0, target_size - len(tx._unpadded()) - 4)
    return Transaction(
        kind=kind,
        sender=tx.sender,
        body=tx.body,
        fee=fee,
        nonce=nonce,
        padding=padding,
    )


#######################
# Blocks
#######################


@dataclass(frozen=True)
class BlockHeader:
    parent_hash: Hash
    tx_root: Hash
    ctp_db_hash: Hash
    height: int
    timestamp: int
    miner: Address

    def canonical(self) -> bytes:
        return encode_fields(
            [
                self.parent_hash,
                self.tx_root,
                self.ctp_db_hash,
                self.height,
                self.timestamp,
                self.miner,
            ]
        )

    @cached_property
    def hash(self) -> Hash:
        return digest(self.canonical())


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    txs: Tuple[Transaction, ...]

    def canonical(self) -> bytes:
        return self.header.canonical() + encode_fields([tx.canonical() for tx in self.txs])

    @cached_property
    def byte_size(self) -> int:
        return len(self.canonical())

    @property
    def hash(self) -> Hash:
        return self.header.hash

    @property
    def height(self) -> int:
        return self.header.height


def compute_tx_root(txs: Iterable[Transaction]) -> Hash:
    ids = [tx.id for tx in txs]
    if not ids:
        return ZERO_HASH
    return build_merkle_tree(ids).root


#######################
# Ledger
#######################


@dataclass
class AccountState:
    available: int = 0
    held: int = 0

    @property
    def total(self) -> int:
        return self.available + self.held


class Ledger:
    """Account balances with hold, release and capture primitives."""

    def __init__(self):
        self.accounts: Dict[Address, AccountState] = {}
        self.create_account(BURN_ADDRESS)

    def create_account(self, address: bytes, balance: int = 0) -> AccountState:
        address = Address(bytes(address))
        if address not in self.accounts:
            self.accounts[address] = AccountState()
        self.accounts[address].available += balance
        return self.accounts[address]

    def has_account(self, address: bytes) -> bool:
        return bytes(address) in self.accounts

    def account(self, address: bytes) -> AccountState:
        try:
            return self.accounts[bytes(address)]
        except KeyError:
            raise UnknownAccount(f"No account {bytes(address).hex()}") from None

    @staticmethod
    def _check_amount(amount: int):
        if amount < 0:
            raise ValueError(f"Amount must be non-negative, got {amount}")

    def transfer(self, source: bytes, target: bytes, amount: int):
        self._check_amount(amount)
        src = self.account(source)
        dst = self.account(target)
        if src.available < amount:
            raise InsufficientFunds(
                f"{bytes(source).hex()} has {src.available}, needs {amount}"
            )
        src.available -= amount
        dst.available += amount

    def burn(self, source: bytes, amount: int):
        """Move funds to the unspendable burn address."""
        self.transfer(source, BURN_ADDRESS, amount)

    def hold_funds(self, address: bytes, amount: int):
        self._check_amount(amount)
        state = self.account(address)
        if state.available < amount:
            raise InsufficientFunds(
                f"{bytes(address).hex()} has {state.available}, cannot hold {amount}"
            )
        state.available -= amount
        state.held += amount

    def release_hold(self, address: bytes, amount: int):
        self._check_amount(amount)
        state = self.account(address)
        if state.held < amount:
            raise InsufficientHold(
                f"{bytes(address).hex()} holds {state.held}, cannot release {amount}"
            )
        state.held -= amount
        state.available += amount

    def capture_hold(self, source: bytes, target: bytes, amount: int):
        self._check_amount(amount)
        src = self.account(source)
        dst = self.account(target)
        if src.held < amount:
            raise InsufficientHold(
                f"{bytes(source).hex()} holds {src.held}, cannot capture {amount}"
            )
        src.held -= amount
        dst.available += amount

    def total_supply(self) -> int:
        return sum(state.total for state in self.accounts.values())

    def totals(self) -> Dict[Address, int]:
        return {address: state.total for address, state in self.accounts.items()}

    @contextmanager
    def atomic(self):
        """Roll every balance back if the block raises."""
        snapshot = {
            address: AccountState(state.available, state.held)
            for address, state in self.accounts.items()
        }
        try:
            yield self
        except Exception:
            self.accounts = snapshot
            raise


#######################
# Chain
#######################


@dataclass
class TxRule:
    """Semantics of one transaction kind.

    ``apply`` mutates the live ledger (fees excluded). ``deltas`` gives the
    same effect as per-account changes of available + held, used by replay.
    ``on_mined`` runs once the transaction is sealed in a block.
    """

    apply: Callable[[Ledger, Transaction], None]
    deltas: Callable[[Transaction], Dict[bytes, int]]
    on_mined: Optional[Callable[[Transaction, "Block"], None]] = None


@dataclass(frozen=True)
class ChainVerdict:
    ok: bool
    height: Optional[int] = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


@dataclass
class DroppedTx:
    tx: Transaction
    reason: str
    at: int


class Blockchain:
    def __init__(
        self,
        ledger: Ledger,
        miner: bytes,
        block_capacity: int = DEFAULT_BLOCK_CAPACITY,
        fee: int = DEFAULT_TX_FEE,
        genesis_txs: Iterable[Transaction] = (),
        genesis_ctp_db_hash: Hash = ZERO_HASH,
        timestamp: int = 0,
    ):
        """Create the chain and seal its genesis block.

        Genesis transactions are not charged fees and have no ledger effect.
        Account balances at construction time are the replay starting point.
        """
        if block_capacity < 1:
            raise ValueError("Block capacity must be at least 1")
        self.ledger = ledger
        self.miner = Address(bytes(miner))
        self.ledger.create_account(self.miner)
        self.block_capacity = block_capacity
        self.fee = fee
        self.rules: Dict[TxKind, TxRule] = {}
        self.mempool: Deque[Transaction] = deque()
        self.dropped: List[DroppedTx] = []
        self.offchain: List[Tuple[str, Dict[bytes, int]]] = []
        self._known: set = set()
        self._inclusion: Dict[Hash, int] = {}
        self.genesis_totals = dict(ledger.totals())

        genesis_txs = tuple(genesis_txs)
        header = BlockHeader(
            parent_hash=ZERO_HASH,
            tx_root=compute_tx_root(genesis_txs),
            ctp_db_hash=Hash(bytes(genesis_ctp_db_hash)),
            height=0,
            timestamp=timestamp,
            miner=self.miner,
        )
        self.blocks: List[Block] = [Block(header=header, txs=genesis_txs)]
        for tx in genesis_txs:
            self._known.add(tx.id)
            self._inclusion[tx.id] = 0
        self.last_ctp_db_hash = header.ctp_db_hash

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.head.height

    @property
    def genesis(self) -> Block:
        return self.blocks[0]

    def register_rule(self, kind: TxKind, rule: TxRule):
        self.rules[kind] = rule

    def record_offchain(self, reason: str, deltas: Dict[bytes, int]):
        """Log a ledger movement that happens outside any transaction."""
        self.offchain.append((reason, dict(deltas)))

    def submit_transaction(self, tx: Transaction) -> Hash:
        """Queue a transaction for the next mining tick.

        Raises
        ------
            DuplicateTx: if the id was already submitted or mined
            UnknownAccount: if the sender has no account
        """
        if tx.id in self._known:
            raise DuplicateTx(f"Transaction {tx.id.hex()} already known")
        if not self.ledger.has_account(tx.sender):
            raise UnknownAccount(f"Sender {tx.sender.hex()} has no account")
        self._known.add(tx.id)
        self.mempool.append(tx)
        logger.debug("Queued %s %s", tx.kind.value, tx.id.hex()[:16])
        return tx.id

    def _apply(self, tx: Transaction):
        rule = self.rules.get(tx.kind)
        if rule is None:
            raise SpbError(f"No rule registered for {tx.kind.value}")
        with self.ledger.atomic():
            self.ledger.transfer(tx.sender, self.miner, tx.fee)
            rule.apply(self.ledger, tx)

    def mine_tick(
        self, now: int, ctp_db_hash: bytes, force: bool = False
    ) -> Optional[Block]:
        """Seal up to ``block_capacity`` transactions into a new block.

        A block is produced when at least one transaction applies or the CTP
        database digest moved since the last committed header. Transactions
        that fail to apply are dropped and reported.
        """
        ctp_db_hash = Hash(bytes(ctp_db_hash))
        accepted: List[Transaction] = []
        while self.mempool and len(accepted) < self.block_capacity:
            tx = self.mempool.popleft()
            try:
                self._apply(tx)
            except (SpbError, ValueError) as e:
                self.dropped.append(DroppedTx(tx=tx, reason=str(e), at=now))
                logger.warning(
                    "Dropped %s %s: %s", tx.kind.value, tx.id.hex()[:16], e
                )
                continue
            accepted.append(tx)

        if not accepted and ctp_db_hash == self.last_ctp_db_hash and not force:
            return None

        header = BlockHeader(
            parent_hash=self.head.hash,
            tx_root=compute_tx_root(accepted),
            ctp_db_hash=ctp_db_hash,
            height=self.height + 1,
            timestamp=now,
            miner=self.miner,
        )
        block = Block(header=header, txs=tuple(accepted))
        self.blocks.append(block)
        self.last_ctp_db_hash = ctp_db_hash
        for tx in accepted:
            self._inclusion[tx.id] = block.height
            rule = self.rules[tx.kind]
            if rule.on_mined is not None:
                rule.on_mined(tx, block)
        logger.debug(
            "Mined block %d with %d txs at t=%d", block.height, len(accepted), now
        )
        return block

    def inclusion_height(self, tx_id: bytes) -> Optional[int]:
        return self._inclusion.get(bytes(tx_id))

    def inclusion_time(self, tx_id: bytes) -> Optional[int]:
        height = self.inclusion_height(tx_id)
        return None if height is None else self.blocks[height].header.timestamp

    def transactions(self, include_genesis: bool = False) -> List[Transaction]:
        blocks = self.blocks if include_genesis else self.blocks[1:]
        return [tx for block in blocks for tx in block.txs]

    def tx_count(self, kind: Optional[TxKind] = None) -> int:
        return sum(1 for tx in self.transactions() if kind is None or tx.kind == kind)


#######################
# Verification and export
#######################


def chain_size_bytes(chain: Blockchain) -> int:
    """Sum of the canonical serialized sizes of all blocks."""
    return sum(block.byte_size for block in chain.blocks)


def _replay_totals(chain: Blockchain) -> Tuple[Dict[bytes, int], Optional[ChainVerdict]]:
    totals: Dict[bytes, int] = {bytes(a): v for a, v in chain.genesis_totals.items()}
    for block in chain.blocks[1:]:
        for tx in block.txs:
            rule = chain.rules.get(tx.kind)
            if rule is None:
                return totals, ChainVerdict(
                    False, block.height, f"no rule for {tx.kind.value}"
                )
            changes = {bytes(tx.sender): -tx.fee}
            changes[bytes(block.header.miner)] = (
                changes.get(bytes(block.header.miner), 0) + tx.fee
            )
            for address, delta in rule.deltas(tx).items():
                changes[bytes(address)] = changes.get(bytes(address), 0) + delta
            for address, delta in changes.items():
                totals[address] = totals.get(address, 0) + delta
                if totals[address] < 0:
                    return totals, ChainVerdict(
                        False, block.height, f"negative balance for {address.hex()}"
                    )
    for _, deltas in chain.offchain:
        for address, delta in deltas.items():
            totals[bytes(address)] = totals.get(bytes(address), 0) + delta
    return totals, None


def validate_chain(
    chain: Blockchain,
    ctp_replay: Optional[Callable[[int], Optional[bytes]]] = None,
) -> ChainVerdict:
    """Check links, tx roots, CTP-database commitments and replayed balances.

    Args:
        chain: Chain to verify
        ctp_replay: Returns the replayed CTP-database digest at a block height,
            or None when no journal mark exists for it

    Returns
    -------
        ChainVerdict, falsy with the first violation when the chain is invalid
    """
    try:
        seen = set()
        for index, block in enumerate(chain.blocks):
            header = block.header
            if header.height != index:
                return ChainVerdict(False, index, "height out of sequence")
            expected_parent = ZERO_HASH if index == 0 else chain.blocks[index - 1].hash
            if header.parent_hash != expected_parent:
                return ChainVerdict(False, index, "parent hash mismatch")
            if index > 0 and header.timestamp < chain.blocks[index - 1].header.timestamp:
                return ChainVerdict(False, index, "timestamp went backwards")
            if header.tx_root != compute_tx_root(block.txs):
                return ChainVerdict(False, index, "tx root mismatch")
            if index > 0 and len(block.txs) > chain.block_capacity:
                return ChainVerdict(False, index, "block over capacity")
            for tx in block.txs:
                if tx.id in seen:
                    return ChainVerdict(False, index, f"duplicate tx {tx.id.hex()}")
                seen.add(tx.id)
                if index > 0 and tx.fee != chain.fee:
                    return ChainVerdict(False, index, f"wrong fee on {tx.id.hex()}")
            if ctp_replay is not None:
                replayed = ctp_replay(index)
                if replayed is not None and bytes(replayed) != header.ctp_db_hash:
                    return ChainVerdict(False, index, "ctp_db_hash mismatch")

        totals, failure = _replay_totals(chain)
        if failure is not None:
            return failure
        live = {bytes(a): v for a, v in chain.ledger.totals().items()}
        for address in set(totals) | set(live):
            if totals.get(address, 0) != live.get(address, 0):
                return ChainVerdict(
                    False, chain.height, f"replayed balance differs for {address.hex()}"
                )
    except (AttributeError, KeyError, TypeError, ValueError) as e:
        return ChainVerdict(False, None, f"malformed chain: {e}")
    return ChainVerdict(True)


def block_record(block: Block) -> dict:
    header = block.header
    return {
        "height": header.height,
        "hash": header.hash.hex(),
        "parent_hash": header.parent_hash.hex(),
        "tx_root": header.tx_root.hex(),
        "ctp_db_hash": header.ctp_db_hash.hex(),
        "timestamp": header.timestamp,
        "miner": header.miner.hex(),
        "tx_ids": [tx.id.hex() for tx in block.txs],
        "tx_kinds": [tx.kind.value for tx in block.txs],
        "byte_size": block.byte_size,
    }


def export_jsonl(chain: Blockchain, path) -> Path:
    """Write one JSON record per block."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for block in chain.blocks:
            f.write(json.dumps(block_record(block), sort_keys=True) + "\n")
    return path
