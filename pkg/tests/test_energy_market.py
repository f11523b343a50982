"""Test cases for the energy-market contract."""

import unittest

from spb_energy.core.coe import Manufacturer, certify_meter, create_meter
from spb_energy.core.constants import BURN_ADDRESS
from spb_energy.core.crypto import derive_seed, generate_keypair
from spb_energy.core.ctp_store import CtpStatus, CtpStore
from spb_energy.core.energy_market import (
    AuthorityCert,
    AuthorityProvenance,
    Burn,
    BurnProvenance,
    EnergyBook,
    EnergyMarket,
    contract_deploy_tx,
    issue_authority_cert,
)
from spb_energy.core.exceptions import (
    AccountExists,
    AlreadySettled,
    BadAuthoritySignature,
    BadCoE,
    BadMeterSignature,
    CtpExpired,
    CtpNotFound,
    EnergyMismatch,
    InsufficientFunds,
    NoAccount,
    NonPositiveAmount,
)
from spb_energy.core.simchain import Blockchain, Ledger, TxKind, validate_chain
from spb_energy.core.trade_protocol import make_ctp, make_erc


def keypair(label):
    return generate_keypair(derive_seed(21, label))


class MarketTestCase(unittest.TestCase):
    def setUp(self):
        """Set up a chain, a market, one consumer, one producer and a certified meter."""
        self.consumer = keypair("consumer")
        self.producer = keypair("producer").address
        self.authority = keypair("authority")
        self.manufacturer = Manufacturer(keypair("manufacturer"))

        self.ledger = Ledger()
        self.ledger.create_account(self.consumer.address, 1000)
        self.ledger.create_account(self.producer, 100)
        self.book = EnergyBook()
        self.store = CtpStore(self.ledger, self.book, fee=20)
        deploy = contract_deploy_tx(self.consumer.address, 20, 5600)
        self.chain = Blockchain(
            self.ledger, keypair("miner").address, block_capacity=4, fee=20, genesis_txs=[deploy]
        )
        self.market = EnergyMarket(
            self.chain,
            self.store,
            self.book,
            self.manufacturer.public_key,
            self.authority.public_key,
            burn_amount=10,
        )

        self.meter = create_meter(derive_seed(21, "meter"), self.manufacturer, leaf_count=4)
        peer = create_meter(derive_seed(21, "peer"), self.manufacturer, leaf_count=4)
        certify_meter(self.meter, peer)

    def open_producer(self, energy=100, price=2):
        self.market.create_energy_account(self.producer, Burn(), price_per_kwh=price)
        self.market.add_energy(self.producer, energy)

    def pending_ctp(self, ttl=60000, now=0):
        ctp = make_ctp(self.consumer, self.producer, 40, 50, ttl, now)
        return self.store.insert_ctp(ctp, now)

    def mine(self, now):
        return self.chain.mine_tick(now, self.store.db_hash())


class TestEnergyAccounts(MarketTestCase):
    """Test cases for account creation and offers."""

    def test_burn_account(self):
        account = self.market.create_energy_account(self.producer, Burn())
        self.assertIsInstance(account.provenance, BurnProvenance)
        self.assertEqual(self.ledger.account(self.producer).available, 90)
        self.assertEqual(self.ledger.account(BURN_ADDRESS).available, 10)

    def test_authority_account(self):
        cert = issue_authority_cert(self.producer, self.authority.secret_key)
        account = self.market.create_energy_account(self.producer, cert)
        self.assertIsInstance(account.provenance, AuthorityProvenance)
        self.assertEqual(self.ledger.account(self.producer).available, 100)

    def test_forged_authority_rejected(self):
        forged = issue_authority_cert(self.producer, keypair("impostor").secret_key)
        with self.assertRaises(BadAuthoritySignature):
            self.market.create_energy_account(self.producer, forged)
        with self.assertRaises(BadAuthoritySignature):
            self.market.create_energy_account(self.producer, AuthorityCert(signature=b""))

    def test_account_exists(self):
        self.market.create_energy_account(self.producer, Burn())
        with self.assertRaises(AccountExists):
            self.market.create_energy_account(self.producer, Burn())

    def test_add_energy_is_a_transaction(self):
        self.open_producer(energy=100)
        self.assertEqual(len(self.chain.mempool), 1)
        self.assertEqual(self.chain.mempool[0].kind, TxKind.ENERGY_ADD)
        self.assertEqual(self.chain.mempool[0].byte_size, 600)
        self.assertEqual(self.book.account(self.producer).energy_available, 100)

    def test_add_energy_validation(self):
        with self.assertRaises(NoAccount):
            self.market.add_energy(self.producer, 10)
        self.market.create_energy_account(self.producer, Burn())
        with self.assertRaises(NonPositiveAmount):
            self.market.add_energy(self.producer, 0)
        with self.assertRaises(NonPositiveAmount):
            self.market.add_energy(self.producer, 10, price_per_kwh=0)

    def test_query_offers_filters_and_sorts(self):
        self.open_producer(energy=100, price=3)
        cheap = keypair("cheap").address
        self.ledger.create_account(cheap, 100)
        self.market.create_energy_account(cheap, Burn(), price_per_kwh=1)
        self.market.add_energy(cheap, 20)

        offers = self.market.query_offers()
        self.assertEqual([o.producer for o in offers], [cheap, self.producer])
        self.assertEqual(self.market.query_offers(min_energy=50)[0].producer, self.producer)
        self.assertEqual(self.market.query_offers(max_price=2)[0].producer, cheap)
        self.assertEqual(self.market.query_offers(min_energy=500), [])


class TestSettlement(MarketTestCase):
    """Test cases for ERC verification and SettledCtp."""

    def setUp(self):
        super().setUp()
        self.open_producer()
        self.ctp_id = self.pending_ctp()

    def test_valid_erc_settles_after_mining(self):
        """Test that only the mined SettledCtp moves the funds."""
        settlement = self.market.settle_erc(make_erc(self.meter, self.ctp_id, 50), now=1000)
        self.assertEqual(self.store.get(self.ctp_id).status, CtpStatus.SETTLED)
        self.assertEqual(self.ledger.account(self.consumer.address).held, 40)

        seen = []
        self.market.settled_listeners.append(lambda s, block: seen.append(block.height))
        block = self.mine(15000)
        self.assertIn(settlement.tx_id, [tx.id for tx in block.txs])
        self.assertEqual(seen, [1])
        self.assertEqual(settlement.mined_at, 15000)
        self.assertEqual(self.ledger.account(self.consumer.address).held, 0)
        self.assertEqual(self.ledger.account(self.consumer.address).available, 1000 - 40 - 20)
        self.assertTrue(self.store.get(self.ctp_id).paid)
        self.assertTrue(validate_chain(self.chain))

    def test_settled_tx_size(self):
        settlement = self.market.settle_erc(make_erc(self.meter, self.ctp_id, 50), now=1000)
        tx = next(tx for tx in self.chain.mempool if tx.id == settlement.tx_id)
        self.assertEqual(tx.byte_size, 5000)
        self.assertEqual(tx.sender, self.consumer.address)

    def test_energy_is_consumed(self):
        self.market.settle_erc(make_erc(self.meter, self.ctp_id, 50), now=1000)
        account = self.book.account(self.producer)
        self.assertEqual(account.energy_available, 50)
        self.assertEqual(account.energy_reserved, 0)

    def test_second_erc_rejected(self):
        self.market.settle_erc(make_erc(self.meter, self.ctp_id, 50), now=1000)
        with self.assertRaises(AlreadySettled):
            self.market.settle_erc(make_erc(self.meter, self.ctp_id, 50), now=2000)

    def test_energy_mismatch(self):
        with self.assertRaises(EnergyMismatch):
            self.market.settle_erc(make_erc(self.meter, self.ctp_id, 49), now=1000)
        self.assertEqual(self.store.get(self.ctp_id).status, CtpStatus.PENDING)

    def test_expired_ctp(self):
        with self.assertRaises(CtpExpired):
            self.market.settle_erc(make_erc(self.meter, self.ctp_id, 50), now=60000)

    def test_unknown_ctp(self):
        with self.assertRaises(CtpNotFound):
            self.market.settle_erc(make_erc(self.meter, b"\x07" * 32, 50), now=1000)

    def test_rogue_meter_rejected(self):
        """Test that a meter certified under another CA cannot settle."""
        rogue_ca = Manufacturer(keypair("rogue-ca"))
        rogue = create_meter(derive_seed(21, "rogue"), rogue_ca, leaf_count=2)
        rogue_peer = create_meter(derive_seed(21, "rogue-peer"), rogue_ca, leaf_count=2)
        certify_meter(rogue, rogue_peer)
        with self.assertRaises(BadCoE):
            self.market.settle_erc(make_erc(rogue, self.ctp_id, 50), now=1000)
        self.assertEqual(self.store.get(self.ctp_id).status, CtpStatus.PENDING)

    def test_signature_from_other_leaf_rejected(self):
        erc = make_erc(self.meter, self.ctp_id, 50)
        other = make_erc(self.meter, self.ctp_id, 50)
        swapped = type(erc)(
            ctp_id=erc.ctp_id,
            energy_amount=erc.energy_amount,
            leaf_pk=erc.leaf_pk,
            coe=erc.coe,
            proof=erc.proof,
            meter_sig=other.meter_sig,
        )
        with self.assertRaises(BadMeterSignature):
            self.market.settle_erc(swapped, now=1000)

    def test_back_to_back_ctps_with_unmined_settlement(self):
        """Test that a second CTP cannot spend the fee the first settlement still owes."""
        small = keypair("small-consumer")
        self.ledger.create_account(small.address, 100)
        first = self.store.insert_ctp(make_ctp(small, self.producer, 40, 20, 60000, 0, b"\x01" * 8), 0)
        self.market.settle_erc(make_erc(self.meter, first, 20), now=1000)
        with self.assertRaises(InsufficientFunds):
            self.store.insert_ctp(make_ctp(small, self.producer, 40, 20, 60000, 2000, b"\x02" * 8), 2000)

        self.mine(15000)
        record = self.store.get(first)
        self.assertTrue(record.paid)
        account = self.ledger.account(small.address)
        self.assertEqual((account.available, account.held), (40, 0))
        second = self.store.insert_ctp(make_ctp(small, self.producer, 20, 20, 60000, 16000, b"\x03" * 8), 16000)
        self.market.settle_erc(make_erc(self.meter, second, 20), now=17000)
        self.mine(30000)
        self.assertTrue(self.store.get(second).paid)
        self.assertEqual(self.ledger.account(small.address).available, 0)
        self.assertEqual(self.ledger.account(small.address).held, 0)
        self.assertTrue(validate_chain(self.chain))

    def test_expiry_refunds_without_settlement(self):
        self.store.sweep_expired(60000)
        self.mine(60000)
        self.assertEqual(self.ledger.account(self.consumer.address).available, 1000)
        self.assertEqual(self.chain.tx_count(TxKind.SETTLED_CTP), 0)
        self.assertEqual(self.book.account(self.producer).energy_available, 100)


if __name__ == "__main__":
    unittest.main()
