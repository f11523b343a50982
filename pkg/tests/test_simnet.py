"""Test cases for the discrete-event network."""

import random
import unittest

from hypothesis import given, settings
from hypothesis import strategies as st

from spb_energy.core.exceptions import PastEvent, UnknownNode
from spb_energy.core.simnet import TIMER, LatencyModel, SimEvent, SimNetwork


class Recorder:
    def __init__(self, net, node_id):
        self.events = []
        self.net = net
        net.register(node_id, self.events.append)


class TestSimNetwork(unittest.TestCase):
    """Test cases for SimNetwork."""

    def setUp(self):
        self.net = SimNetwork(LatencyModel(base_ms=50, jitter_ms=20), random.Random(42))
        self.a = Recorder(self.net, "a")
        self.b = Recorder(self.net, "b")
        self.c = Recorder(self.net, "c")

    def test_events_fire_in_time_order(self):
        self.net.post("a", "late", 300)
        self.net.post("a", "early", 100)
        self.net.post("a", "middle", 200)
        self.net.run_until(1000)
        self.assertEqual([e.payload for e in self.a.events], ["early", "middle", "late"])

    def test_ties_break_by_insertion_order(self):
        for i in range(5):
            self.net.post("b", i, 100)
        self.net.run_until(100)
        self.assertEqual([e.payload for e in self.b.events], [0, 1, 2, 3, 4])

    def test_clock_is_monotonic(self):
        times = []
        self.net.register("watch", lambda e: times.append(self.net.now))
        for delay in (30, 10, 20, 10):
            self.net.post("watch", None, delay)
        self.net.run_until(100)
        self.assertEqual(times, sorted(times))
        self.assertEqual(self.net.now, 100)

    def test_past_event_raises(self):
        self.net.run_until(500)
        with self.assertRaises(PastEvent):
            self.net.schedule(SimEvent(fire_time=100, sequence=999, target="a", payload=None))

    def test_unknown_target_raises(self):
        with self.assertRaises(UnknownNode):
            self.net.post("nobody", "x", 10)

    def test_unicast_latency_bounds(self):
        for _ in range(50):
            event = self.net.unicast("a", "b", "ping")
            self.assertGreaterEqual(event.fire_time - self.net.now, 50)
            self.assertLessEqual(event.fire_time - self.net.now, 70)
        self.assertEqual(self.net.latency.max_delay, 70)

    def test_broadcast_skips_sender(self):
        events = self.net.broadcast("a", "hello")
        self.assertEqual(sorted(e.target for e in events), ["b", "c"])
        self.net.run_until(1000)
        self.assertEqual(self.a.events, [])
        self.assertEqual(len(self.b.events), 1)
        self.assertEqual(self.b.events[0].source, "a")

    def test_timer_kind(self):
        self.net.set_timer("c", 250, "wake")
        self.net.run_until(1000)
        self.assertEqual(self.c.events[0].kind, TIMER)
        self.assertEqual(self.c.events[0].fire_time, 250)

    def test_run_while_stops_on_predicate(self):
        for i in range(5):
            self.net.post("a", i, 10 * (i + 1))
        processed = self.net.run_while(lambda: len(self.a.events) < 2, 1000)
        self.assertEqual(processed, 2)
        self.assertEqual(self.net.pending(), 3)

    def test_same_seed_same_trace(self):
        """Test that two runs with the same seed produce identical traces."""
        digests = []
        for _ in range(2):
            net = SimNetwork(LatencyModel(50, 20), random.Random(9))
            for node in ("x", "y", "z"):
                net.register(node, lambda e: None)
            for i in range(20):
                net.broadcast("x", i)
            net.run_until(10_000)
            digests.append(net.trace_digest())
        self.assertEqual(digests[0], digests[1])

    def test_negative_latency_rejected(self):
        with self.assertRaises(ValueError):
            LatencyModel(base_ms=-1)


class TestEventOrder(unittest.TestCase):
    """Test cases for the dispatch order of many events."""

    def test_ten_thousand_events_match_a_sort(self):
        net = SimNetwork(LatencyModel(0, 0), random.Random(0))
        seen = []
        net.register("sink", seen.append)
        delays = random.Random(2024)
        posted = [net.post("sink", i, delays.randrange(0, 500)) for i in range(10_000)]
        net.run_until(1000)
        expected = sorted(posted, key=lambda e: (e.fire_time, e.sequence))
        self.assertEqual([e.payload for e in seen], [e.payload for e in expected])
        self.assertEqual(net.processed_count, 10_000)

    @settings(max_examples=50, deadline=None)
    @given(
        delays=st.lists(st.integers(0, 40), min_size=1, max_size=40),
        follow_ups=st.lists(st.integers(0, 40), max_size=40),
    )
    def test_events_scheduled_while_running_keep_order(self, delays, follow_ups):
        net = SimNetwork(LatencyModel(0, 0), random.Random(0))
        seen = []
        pending = list(follow_ups)

        def handle(event):
            seen.append(event)
            if pending:
                net.post("sink", "follow-up", pending.pop())

        net.register("sink", handle)
        for delay in delays:
            net.post("sink", "first", delay)
        net.run_until(10_000)
        keys = [(e.fire_time, e.sequence) for e in seen]
        self.assertEqual(keys, sorted(keys))
        self.assertEqual(len(seen), len(delays) + len(follow_ups))


if __name__ == "__main__":
    unittest.main()
