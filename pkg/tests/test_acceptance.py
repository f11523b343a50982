"""End-to-end comparison of both protocols under the calibration settings."""

import io
import tempfile
import unittest
from pathlib import Path

from rich.console import Console

from spb_energy.core.config import ExperimentConfig
from spb_energy.core.metrics import OutcomeRow, check_acceptance, compare, completion_time_min
from spb_energy.core.trade_protocol import TradeResult, run_trade
from spb_energy.core.world import build_world
from spb_energy.services.experiment_service import ExperimentService

REPO_ROOT = Path(__file__).resolve().parent.parent


class TestCalibratedComparison(unittest.TestCase):
    """Run the batch scenario once per protocol and compare the reports."""

    @classmethod
    def setUpClass(cls):
        cls.temp_dir = tempfile.TemporaryDirectory()
        config = ExperimentConfig.from_file(REPO_ROOT / "paper.cfg").with_overrides(
            replicates=20
        )
        service = ExperimentService(
            config, Console(file=io.StringIO()), output_dir=Path(cls.temp_dir.name)
        )
        cls.spb = service.run_experiment("batch", "spb").report
        cls.baseline = service.run_experiment("batch", "baseline").report
        cls.table = compare(cls.spb, cls.baseline).set_index("metric")

    @classmethod
    def tearDownClass(cls):
        cls.temp_dir.cleanup()

    def test_every_trade_settles(self):
        self.assertEqual(self.spb.counts["settled_paid"], self.spb.trade_count)
        self.assertEqual(self.baseline.counts["settled_paid"], self.baseline.trade_count)

    def test_one_third_of_cost_and_transactions(self):
        self.assertAlmostEqual(self.table.loc["cost_ratio", "value"], 1 / 3)
        self.assertAlmostEqual(self.table.loc["tx_count_ratio", "value"], 1 / 3)
        self.assertEqual(self.spb.per_trade_consumer_cost, 20)
        self.assertEqual(self.baseline.per_trade_consumer_cost, 60)

    def test_delay_reduction(self):
        reduction = self.table.loc["delay_reduction_pct", "value"]
        self.assertGreater(reduction, 25)
        self.assertLess(reduction, 45)

    def test_chain_size_ratio(self):
        self.assertAlmostEqual(self.table.loc["size_ratio", "value"], 0.60, delta=0.06)

    def test_throughput_ratio(self):
        self.assertAlmostEqual(self.table.loc["throughput_ratio", "value"], 0.52, delta=0.10)

    def test_all_bands_hold(self):
        self.assertEqual(check_acceptance(self.table.reset_index()), [])


class TestStructuralCriteria(unittest.TestCase):
    """Scenario-level checks that need no calibration bands."""

    def small_config(self, **overrides):
        values = dict(seed=12, consumers=4, producers=2, merkle_leaves=4, trade_count=10, replicates=3)
        values.update(overrides)
        return ExperimentConfig(**values)

    def test_spb_faster_at_every_capacity(self):
        for capacity in (1, 2, 4):
            with self.subTest(capacity=capacity):
                service = ExperimentService(
                    self.small_config(block_capacity=capacity), Console(file=io.StringIO())
                )
                times = {}
                for protocol in ("spb", "baseline"):
                    outcomes, _ = service.run_batch(protocol)
                    times[protocol] = completion_time_min([OutcomeRow.from_outcome(o) for o in outcomes])
                self.assertLess(times["spb"], times["baseline"])

    def test_same_seed_same_report(self):
        reports = []
        for _ in range(2):
            service = ExperimentService(self.small_config(), Console(file=io.StringIO()))
            reports.append(service.run_experiment("reliable", "spb").report.to_json())
        self.assertEqual(reports[0], reports[1])

    def test_header_tracks_ctp_insertion_and_removal(self):
        """Test that the committed CTP digest changes once on insertion and once on expiry."""
        world = build_world(self.small_config(), "spb")
        outcome = run_trade(world, reliable=False)
        self.assertEqual(outcome.result, TradeResult.EXPIRED_REFUNDED)
        world.net.run_until(world.net.now + world.config.mining_period_ms)
        digests = [block.header.ctp_db_hash for block in world.chain.blocks]
        changes = sum(1 for a, b in zip(digests, digests[1:]) if a != b)
        self.assertEqual(changes, 2)


if __name__ == "__main__":
    unittest.main()
