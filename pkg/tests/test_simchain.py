"""Test cases for the simulated blockchain and ledger."""

import json
import shutil
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

from spb_energy.core.constants import BURN_ADDRESS, ZERO_HASH
from spb_energy.core.crypto import derive_address, digest
from spb_energy.core.exceptions import (
    DuplicateTx,
    InsufficientFunds,
    InsufficientHold,
    UnknownAccount,
)
from spb_energy.core.simchain import (
    Block,
    Blockchain,
    Ledger,
    TxKind,
    TxRule,
    chain_size_bytes,
    export_jsonl,
    make_transaction,
    validate_chain,
)

ALICE = derive_address(b"alice")
BOB = derive_address(b"bob")
MINER = derive_address(b"miner")


def payment_rule():
    """A minimal contract: move ``amount`` from sender to ``to``."""

    def apply(ledger, tx):
        ledger.transfer(tx.sender, tx.field("to"), tx.field("amount"))

    def deltas(tx):
        return {tx.sender: -tx.field("amount"), tx.field("to"): tx.field("amount")}

    return TxRule(apply=apply, deltas=deltas)


def payment(amount, nonce=0, sender=ALICE, size=0):
    return make_transaction(
        TxKind.ENERGY_ADD, sender, {"to": BOB, "amount": amount}, fee=20, target_size=size, nonce=nonce
    )


class TestLedger(unittest.TestCase):
    """Test cases for balances, holds and atomic rollback."""

    def setUp(self):
        self.ledger = Ledger()
        self.ledger.create_account(ALICE, 1000)
        self.ledger.create_account(BOB)

    def test_hold_release_capture(self):
        self.ledger.hold_funds(ALICE, 300)
        self.assertEqual(self.ledger.account(ALICE).available, 700)
        self.assertEqual(self.ledger.account(ALICE).held, 300)
        self.ledger.release_hold(ALICE, 100)
        self.ledger.capture_hold(ALICE, BOB, 200)
        self.assertEqual(self.ledger.account(ALICE).total, 800)
        self.assertEqual(self.ledger.account(BOB).available, 200)
        self.assertEqual(self.ledger.total_supply(), 1000)

    def test_overdraw_raises(self):
        with self.assertRaises(InsufficientFunds):
            self.ledger.hold_funds(ALICE, 1001)
        with self.assertRaises(InsufficientHold):
            self.ledger.capture_hold(ALICE, BOB, 1)
        with self.assertRaises(UnknownAccount):
            self.ledger.transfer(ALICE, b"\x09" * 20, 1)

    def test_burn_keeps_supply(self):
        self.ledger.burn(ALICE, 10)
        self.assertEqual(self.ledger.account(BURN_ADDRESS).available, 10)
        self.assertEqual(self.ledger.total_supply(), 1000)

    def test_atomic_rolls_back(self):
        """Test that a failure inside atomic() leaves no partial effect."""
        with self.assertRaises(InsufficientFunds):
            with self.ledger.atomic():
                self.ledger.transfer(ALICE, BOB, 600)
                self.ledger.transfer(ALICE, BOB, 600)
        self.assertEqual(self.ledger.account(ALICE).available, 1000)
        self.assertEqual(self.ledger.account(BOB).available, 0)

    def test_negative_amount_rejected(self):
        with self.assertRaises(ValueError):
            self.ledger.transfer(ALICE, BOB, -5)


class TestBlockchain(unittest.TestCase):
    """Test cases for mining, validation and export."""

    def setUp(self):
        self.ledger = Ledger()
        self.ledger.create_account(ALICE, 1000)
        self.ledger.create_account(BOB)
        self.chain = Blockchain(self.ledger, MINER, block_capacity=2, fee=20)
        self.chain.register_rule(TxKind.ENERGY_ADD, payment_rule())
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_genesis(self):
        self.assertEqual(self.chain.height, 0)
        self.assertEqual(self.chain.genesis.header.parent_hash, ZERO_HASH)
        self.assertTrue(validate_chain(self.chain))

    def test_block_capacity_is_respected(self):
        for i in range(5):
            self.chain.submit_transaction(payment(10, nonce=i))
        first = self.chain.mine_tick(15000, ZERO_HASH)
        second = self.chain.mine_tick(30000, ZERO_HASH)
        third = self.chain.mine_tick(45000, ZERO_HASH)
        self.assertEqual([len(b.txs) for b in (first, second, third)], [2, 2, 1])
        self.assertEqual(first.header.timestamp, 15000)
        self.assertEqual(third.header.parent_hash, second.hash)

    def test_fifo_order(self):
        txs = [payment(10, nonce=i) for i in range(2)]
        for tx in txs:
            self.chain.submit_transaction(tx)
        block = self.chain.mine_tick(15000, ZERO_HASH)
        self.assertEqual([tx.id for tx in block.txs], [tx.id for tx in txs])

    def test_fee_goes_to_miner(self):
        self.chain.submit_transaction(payment(100))
        self.chain.mine_tick(15000, ZERO_HASH)
        self.assertEqual(self.ledger.account(ALICE).available, 880)
        self.assertEqual(self.ledger.account(BOB).available, 100)
        self.assertEqual(self.ledger.account(MINER).available, 20)
        self.assertEqual(self.ledger.total_supply(), 1000)

    def test_no_block_without_work(self):
        self.assertIsNone(self.chain.mine_tick(15000, ZERO_HASH))
        self.assertEqual(self.chain.height, 0)

    def test_ctp_db_change_produces_empty_block(self):
        new_hash = digest(b"ctp db")
        block = self.chain.mine_tick(15000, new_hash)
        self.assertIsNotNone(block)
        self.assertEqual(block.txs, ())
        self.assertEqual(block.header.ctp_db_hash, new_hash)
        self.assertEqual(self.chain.last_ctp_db_hash, new_hash)

    def test_failing_tx_is_dropped(self):
        """Test that an unaffordable transaction is dropped without effect."""
        self.chain.submit_transaction(payment(5000))
        self.chain.submit_transaction(payment(10, nonce=1))
        block = self.chain.mine_tick(15000, ZERO_HASH)
        self.assertEqual(len(block.txs), 1)
        self.assertEqual(len(self.chain.dropped), 1)
        self.assertEqual(self.ledger.account(ALICE).available, 970)
        self.assertTrue(validate_chain(self.chain))

    def test_duplicate_rejected(self):
        tx = payment(10)
        self.chain.submit_transaction(tx)
        with self.assertRaises(DuplicateTx):
            self.chain.submit_transaction(tx)

    def test_unknown_sender_rejected(self):
        with self.assertRaises(UnknownAccount):
            self.chain.submit_transaction(payment(10, sender=derive_address(b"ghost")))

    def test_inclusion_height(self):
        tx = payment(10)
        self.chain.submit_transaction(tx)
        self.assertIsNone(self.chain.inclusion_height(tx.id))
        self.chain.mine_tick(15000, ZERO_HASH)
        self.assertEqual(self.chain.inclusion_height(tx.id), 1)
        self.assertEqual(self.chain.inclusion_time(tx.id), 15000)

    def test_padded_size(self):
        tx = payment(10, size=5000)
        self.assertEqual(tx.byte_size, 5000)
        self.assertEqual(payment(10, size=1).byte_size, len(payment(10).canonical()))

    def test_chain_size_grows_with_tx_sizes(self):
        base = chain_size_bytes(self.chain)
        self.chain.submit_transaction(payment(10, size=5000))
        self.chain.mine_tick(15000, ZERO_HASH)
        self.assertGreater(chain_size_bytes(self.chain) - base, 5000)

    def test_tampered_block_detected(self):
        self.chain.submit_transaction(payment(10))
        self.chain.mine_tick(15000, ZERO_HASH)
        self.chain.submit_transaction(payment(10, nonce=1))
        self.chain.mine_tick(30000, ZERO_HASH)
        forged = payment(999, nonce=7)
        block = self.chain.blocks[1]
        self.chain.blocks[1] = Block(header=block.header, txs=(forged,))
        verdict = validate_chain(self.chain)
        self.assertFalse(verdict)
        self.assertEqual(verdict.height, 1)

    def test_broken_link_detected(self):
        self.chain.submit_transaction(payment(10))
        self.chain.mine_tick(15000, ZERO_HASH)
        block = self.chain.blocks[1]
        header = replace(block.header, parent_hash=digest(b"elsewhere"))
        self.chain.blocks[1] = Block(header=header, txs=block.txs)
        self.assertEqual(validate_chain(self.chain).reason, "parent hash mismatch")

    def test_ctp_replay_mismatch_detected(self):
        self.chain.mine_tick(15000, digest(b"one"))
        verdict = validate_chain(self.chain, lambda height: digest(b"other") if height else None)
        self.assertFalse(verdict)
        self.assertEqual(verdict.reason, "ctp_db_hash mismatch")

    def test_export_jsonl(self):
        self.chain.submit_transaction(payment(10))
        self.chain.mine_tick(15000, ZERO_HASH)
        path = export_jsonl(self.chain, Path(self.temp_dir) / "chain.jsonl")
        records = [json.loads(line) for line in path.read_text().splitlines()]
        self.assertEqual([r["height"] for r in records], [0, 1])
        self.assertEqual(records[1]["parent_hash"], records[0]["hash"])
        self.assertEqual(records[1]["tx_kinds"], ["energy_add"])


if __name__ == "__main__":
    unittest.main()
