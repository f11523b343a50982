"""Test cases for the backbone overlay and price negotiation."""

import random
import unittest

from spb_energy.core.constants import MAX_OVERLAY_HOPS
from spb_energy.core.crypto import Signature, derive_seed, generate_keypair
from spb_energy.core.exceptions import (
    BadMessageSignature,
    ConflictingRegistration,
    InvalidPartition,
    NoRoute,
)
from spb_energy.core.overlay import (
    AgreedPrice,
    BackboneNode,
    NegotiationKind,
    NegotiationMsg,
    NegotiationParty,
    NoDeal,
    Overlay,
    negotiate,
    pk_bits,
    static_partition,
    validate_partition,
)
from spb_energy.core.simnet import LatencyModel, SimNetwork


def keypair(label):
    return generate_keypair(derive_seed(13, label))


class TestPartition(unittest.TestCase):
    """Test cases for backbone prefixes."""

    def test_static_partition(self):
        backbones = static_partition(2)
        self.assertEqual([b.prefix for b in backbones], ["00", "01", "10", "11"])
        self.assertEqual(backbones[0].node_id, "backbone-00")

    def test_every_key_has_exactly_one_owner(self):
        backbones = static_partition(3)
        for i in range(50):
            pk = keypair(f"k{i}").public_key
            owners = [b for b in backbones if b.owns(pk)]
            self.assertEqual(len(owners), 1)
            self.assertTrue(pk_bits(pk).startswith(owners[0].prefix))

    def test_uneven_partition_is_valid(self):
        validate_partition([BackboneNode("a", "0"), BackboneNode("b", "10"), BackboneNode("c", "11")])

    def test_overlapping_prefixes_rejected(self):
        with self.assertRaises(InvalidPartition):
            validate_partition([BackboneNode("a", "0"), BackboneNode("b", "01"), BackboneNode("c", "1")])

    def test_gap_rejected(self):
        with self.assertRaises(InvalidPartition):
            validate_partition([BackboneNode("a", "0"), BackboneNode("b", "10")])

    def test_zero_bits_rejected(self):
        with self.assertRaises(InvalidPartition):
            static_partition(0)

    def test_assignment_matches_longest_prefix_scan(self):
        """Test backbone assignment against a linear longest-prefix scan."""
        backbones = [
            BackboneNode("b0", "0"),
            BackboneNode("b10", "10"),
            BackboneNode("b110", "110"),
            BackboneNode("b1110", "1110"),
            BackboneNode("b1111", "1111"),
        ]
        overlay = Overlay(backbones)
        rng = random.Random(99)
        for _ in range(10_000):
            pk = rng.randbytes(32)
            bits = "".join(f"{byte:08b}" for byte in pk)
            matches = [b for b in backbones if bits.startswith(b.prefix)]
            expected = max(matches, key=lambda b: len(b.prefix))
            self.assertIs(overlay.backbone_for(pk), expected)


class TestRouting(unittest.TestCase):
    """Test cases for registration and routing."""

    def setUp(self):
        self.overlay = Overlay(static_partition(2))
        self.alice = keypair("alice")
        self.bob = keypair("bob")
        self.overlay.register(self.alice.public_key, "consumer-0")
        self.overlay.register(self.bob.public_key, "producer-0")

    def message(self, dest_pk):
        return NegotiationMsg(
            kind=NegotiationKind.OFFER,
            ctx_id=b"\x01" * 32,
            price_per_kwh=2,
            energy=50,
            sender_pk=self.alice.public_key,
            dest_pk=dest_pk,
        ).signed(self.alice.secret_key)

    def test_route_reaches_endpoint(self):
        routed = self.overlay.route(self.message(self.bob.public_key))
        self.assertEqual(routed.hops[-1], "producer-0")
        self.assertLessEqual(len(routed.hops), MAX_OVERLAY_HOPS)
        self.assertEqual(routed.hops[0], self.overlay.backbone_for(self.alice.public_key).node_id)
        self.assertEqual(self.overlay.inboxes["producer-0"][0].price_per_kwh, 2)
        self.assertEqual(self.overlay.routed_count, 1)

    def test_hop_trace_line(self):
        routed = self.overlay.route(self.message(self.bob.public_key))
        fields = self.overlay.hop_trace[0].split(",")
        self.assertEqual(len(fields), 1 + MAX_OVERLAY_HOPS)
        self.assertEqual(fields[0], routed.msg.msg_id)

    def test_unregistered_destination(self):
        with self.assertRaises(NoRoute):
            self.overlay.route(self.message(keypair("nobody").public_key))

    def test_conflicting_registration(self):
        self.overlay.register(self.bob.public_key, "producer-0")
        with self.assertRaises(ConflictingRegistration):
            self.overlay.register(self.bob.public_key, "producer-9")
        self.assertEqual(self.overlay.endpoint_of(self.bob.public_key), "producer-0")

    def test_signature(self):
        msg = self.message(self.bob.public_key)
        self.assertTrue(msg.verify_signature())
        forged = NegotiationMsg(
            kind=msg.kind,
            ctx_id=msg.ctx_id,
            price_per_kwh=1,
            energy=msg.energy,
            sender_pk=msg.sender_pk,
            dest_pk=msg.dest_pk,
            signature=msg.signature,
        )
        self.assertFalse(forged.verify_signature())

    def test_unsigned_message_is_refused(self):
        zeroed = NegotiationMsg(
            kind=NegotiationKind.OFFER,
            ctx_id=b"\x01" * 32,
            price_per_kwh=2,
            energy=50,
            sender_pk=self.alice.public_key,
            dest_pk=self.bob.public_key,
            signature=Signature(b"\x00" * 64),
        )
        with self.assertRaises(BadMessageSignature):
            self.overlay.route(zeroed)
        self.assertEqual(self.overlay.routed_count, 0)
        self.assertNotIn("producer-0", self.overlay.inboxes)
        self.assertEqual(self.overlay.hop_trace, [])

    def test_impersonated_sender_is_refused(self):
        msg = NegotiationMsg(
            kind=NegotiationKind.ACCEPT,
            ctx_id=b"\x01" * 32,
            price_per_kwh=1,
            energy=50,
            sender_pk=self.bob.public_key,
            dest_pk=self.alice.public_key,
        ).signed(self.alice.secret_key)
        with self.assertRaises(BadMessageSignature):
            self.overlay.route(msg)
        self.assertEqual(self.overlay.routed_count, 0)

    def test_delivery_over_network(self):
        net = SimNetwork(LatencyModel(50, 0), random.Random(1))
        received = []
        net.register("producer-0", received.append)
        overlay = Overlay(static_partition(2), net)
        overlay.register(self.bob.public_key, "producer-0")
        routed = overlay.route(self.message(self.bob.public_key))
        net.run_until(1000)
        self.assertEqual(len(received), 1)
        self.assertEqual(received[0].fire_time, 50 * len(routed.hops))
        self.assertEqual(routed.delay_ms, 50 * len(routed.hops))


class TestNegotiation(unittest.TestCase):
    """Test cases for the concession protocol."""

    def setUp(self):
        self.overlay = Overlay(static_partition(2))
        consumer = keypair("buyer")
        producer = keypair("seller")
        self.overlay.register(consumer.public_key, "consumer-0")
        self.overlay.register(producer.public_key, "producer-0")
        self.consumer = NegotiationParty(consumer, "consumer-0")
        self.producer = NegotiationParty(producer, "producer-0")

    def run_negotiation(self, **kwargs):
        params = dict(list_price=10, ceiling=10, opening_price=4, floor_price=6, energy=50)
        params.update(kwargs)
        return negotiate(self.overlay, self.consumer, self.producer, **params)

    def test_elapsed_time_over_a_bound_network(self):
        self.assertEqual(self.run_negotiation(ceiling=8).elapsed_ms, 0)
        net = SimNetwork(LatencyModel(50, 0), random.Random(1))
        for endpoint in ("consumer-0", "producer-0"):
            net.register(endpoint, lambda event: None)
        self.overlay.net = net
        self.overlay.hop_trace.clear()
        result = self.run_negotiation(ceiling=8)
        hops = sum(len([f for f in line.split(",")[1:] if f]) for line in self.overlay.hop_trace)
        self.assertEqual(result.elapsed_ms, 50 * hops)
        self.assertEqual(net.pending(), len(result.transcript))

    def test_list_price_within_ceiling(self):
        result = self.run_negotiation(list_price=5, floor_price=4, ceiling=8)
        self.assertIsInstance(result, AgreedPrice)
        self.assertEqual(result.price_per_kwh, 5)
        self.assertEqual(self.overlay.routed_count, 2)
        self.assertEqual([m.kind for m in result.transcript], [NegotiationKind.OFFER, NegotiationKind.ACCEPT])

    def test_concession_meets_in_the_middle(self):
        result = self.run_negotiation(list_price=10, ceiling=8, opening_price=4, floor_price=6)
        self.assertIsInstance(result, AgreedPrice)
        self.assertGreaterEqual(result.price_per_kwh, 6)
        self.assertLessEqual(result.price_per_kwh, 8)
        self.assertEqual(result.price_per_kwh, 7)
        self.assertEqual(result.rounds, 1)

    def test_agreed_price_within_bounds(self):
        for ceiling in range(6, 12):
            for opening in range(1, ceiling + 1):
                overlay = Overlay(static_partition(2))
                overlay.register(self.consumer.keypair.public_key, "consumer-0")
                overlay.register(self.producer.keypair.public_key, "producer-0")
                result = negotiate(
                    overlay, self.consumer, self.producer,
                    list_price=12, ceiling=ceiling, opening_price=opening, floor_price=6, energy=50,
                )
                if isinstance(result, AgreedPrice):
                    self.assertGreaterEqual(result.price_per_kwh, 6)
                    self.assertLessEqual(result.price_per_kwh, ceiling)

    def test_ceiling_below_floor_is_no_deal(self):
        result = self.run_negotiation(list_price=10, ceiling=5, floor_price=6, max_rounds=3)
        self.assertIsInstance(result, NoDeal)
        self.assertEqual(result.transcript[-1].kind, NegotiationKind.REJECT)

    def test_non_negotiable_offer(self):
        result = self.run_negotiation(list_price=10, ceiling=8, negotiable=False)
        self.assertIsInstance(result, NoDeal)
        self.assertEqual(result.rounds, 0)

    def test_floor_above_list_price(self):
        with self.assertRaises(ValueError):
            self.run_negotiation(list_price=5, floor_price=6)

    def test_messages_are_signed_and_routed(self):
        result = self.run_negotiation(list_price=10, ceiling=8)
        self.assertTrue(all(m.verify_signature() for m in result.transcript))
        self.assertEqual(self.overlay.routed_count, len(result.transcript))

    def test_unicast_versus_broadcast_cost(self):
        """Test that one exchange routes two messages where a broadcast reaches N-1 nodes."""
        result = self.run_negotiation(list_price=5, floor_price=4, ceiling=8)
        self.assertIsInstance(result, AgreedPrice)
        self.assertEqual(self.overlay.routed_count, 2)

        net = SimNetwork(LatencyModel(50, 20), random.Random(4))
        deliveries = []
        for i in range(10):
            net.register(f"node-{i}", deliveries.append)
        net.broadcast("node-0", "offer")
        net.run_until(1000)
        self.assertEqual(len(deliveries), 9)


if __name__ == "__main__":
    unittest.main()
