"""Test cases for the main module."""

import json
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from spb_energy.core.config import ExperimentConfig
from spb_energy.core.constants import EXIT_CHECK_FAILED, EXIT_CONFIG_ERROR, EXIT_FAILURE, EXIT_OK
from spb_energy.core.metrics import MetricsReport, OutcomeRow
from spb_energy.core.simchain import ChainVerdict
from spb_energy.core.world import World
from spb_energy.main import build_parser, load_config, main


def saved_report(path, protocol, fees, tx_count, delay, size=1000):
    rows = [
        OutcomeRow(
            id=f"{protocol}-{i}",
            protocol=protocol,
            result="settled_paid",
            delay_ms=delay,
            fees=fees,
            tx_count=tx_count,
            started_at=i * 1000,
            completed_at=i * 1000 + delay,
        )
        for i in range(2)
    ]
    report = MetricsReport.from_outcomes(protocol, "batch", 7, 2, rows, size, "00", throughput=True)
    return report.save(path)


class TestMain(unittest.TestCase):
    """Test cases for the command line."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def small_config_file(self):
        config = ExperimentConfig(seed=2, consumers=2, producers=2, merkle_leaves=4, replicates=1)
        return config.save(self.root / "small.cfg")

    def test_parser(self):
        args = build_parser().parse_args(["run", "--scenario", "batch", "--seed", "3"])
        self.assertEqual(args.command, "run")
        self.assertEqual(args.scenario, "batch")
        self.assertEqual(args.seed, 3)
        with self.assertRaises(SystemExit):
            build_parser().parse_args(["run", "--scenario", "stormy"])

    def test_load_config_seed_override(self):
        self.assertEqual(load_config(None, seed=12).seed, 12)
        self.assertEqual(load_config(self.small_config_file()).seed, 2)

    def test_config_command(self):
        out = self.root / "default.cfg"
        self.assertEqual(main(["config", "--out", str(out)]), EXIT_OK)
        self.assertEqual(ExperimentConfig.from_file(out), ExperimentConfig())

    def test_bad_config_exit_code(self):
        bad = self.root / "bad.cfg"
        bad.write_text("consumers=none\n", encoding="utf-8")
        self.assertEqual(main(["-q", "run", "--config", str(bad)]), EXIT_CONFIG_ERROR)
        self.assertEqual(
            main(["-q", "run", "--config", str(self.root / "missing.cfg")]), EXIT_CONFIG_ERROR
        )

    def test_run_writes_report(self):
        out = self.root / "run" / "metrics.json"
        code = main(["-q", "run", "--config", str(self.small_config_file()), "--out", str(out)])
        self.assertEqual(code, EXIT_OK)
        data = json.loads(out.read_text(encoding="utf-8"))
        self.assertEqual(data["counts"]["settled_paid"], 1)
        self.assertTrue((out.parent / "chain.jsonl").exists())

    def test_corrupt_run_exit_code(self):
        out = self.root / "run" / "metrics.json"
        verdict = ChainVerdict(ok=False, height=1, reason="parent hash mismatch")
        with patch.object(World, "validate", return_value=verdict):
            code = main(["-q", "run", "--config", str(self.small_config_file()), "--out", str(out)])
        self.assertEqual(code, EXIT_FAILURE)
        self.assertFalse(out.exists())

    def test_compare_check(self):
        """Test that a failed acceptance check yields its own exit code."""
        spb = saved_report(self.root / "a.json", "spb", fees=20, tx_count=1, delay=21500, size=600)
        good = saved_report(self.root / "b.json", "baseline", fees=60, tx_count=3, delay=36500)
        bad = saved_report(self.root / "c.json", "baseline", fees=20, tx_count=1, delay=36500)
        out = str(self.root / "cmp.csv")
        self.assertEqual(main(["-q", "compare", str(spb), str(good), "--out", out, "--check"]), EXIT_OK)
        self.assertEqual(
            main(["-q", "compare", str(spb), str(bad), "--out", out, "--check"]), EXIT_CHECK_FAILED
        )
        self.assertEqual(main(["-q", "compare", str(spb), str(bad), "--out", out]), EXIT_OK)

    def test_compare_mismatched_reports(self):
        spb = saved_report(self.root / "a.json", "spb", fees=20, tx_count=1, delay=21500, size=600)
        single = MetricsReport.from_outcomes("baseline", "reliable", 7, 1, [], 10, "00")
        single.save(self.root / "b.json")
        code = main(["-q", "compare", str(spb), str(self.root / "b.json"), "--out", str(self.root / "x.csv")])
        self.assertEqual(code, EXIT_FAILURE)

    def test_session_script(self):
        script = self.root / "session.txt"
        script.write_text("balance\nadvance 100\nquit\n", encoding="utf-8")
        code = main(
            ["-q", "session", "--config", str(self.small_config_file()), "--script", str(script), "--no-history"]
        )
        self.assertEqual(code, EXIT_OK)

    def test_session_history_recorded(self):
        """Test that a scripted session appends its commands to the history file."""
        script = self.root / "session.txt"
        script.write_text("balance\nadvance 100\n", encoding="utf-8")
        history = self.root / "history" / "session_history.txt"
        with patch("spb_energy.main.get_session_history_path", return_value=history):
            code = main(["-q", "session", "--config", str(self.small_config_file()), "--script", str(script)])
        self.assertEqual(code, EXIT_OK)
        lines = history.read_text(encoding="utf-8").splitlines()
        self.assertTrue(lines[0].startswith("# session "))
        self.assertEqual(lines[1:], ["balance", "advance 100"])

    def test_ctp_exit_codes(self):
        config = str(self.small_config_file())
        self.assertEqual(main(["-q", "ctp", "producer-0", "40", "50", "--config", config]), EXIT_OK)
        self.assertEqual(
            main(["-q", "ctp", "producer-0", "99999999", "50", "--config", config]), EXIT_FAILURE
        )
        self.assertEqual(main(["-q", "ctp", "producer-0", "forty", "50", "--config", config]), EXIT_FAILURE)

    def test_erc_for_unknown_ctp_fails(self):
        code = main(["-q", "erc", "ab" * 32, "50", "--config", str(self.small_config_file())])
        self.assertEqual(code, EXIT_FAILURE)

    def test_missing_session_script(self):
        code = main(["-q", "session", "--script", str(self.root / "none.txt"), "--no-history"])
        self.assertEqual(code, EXIT_CONFIG_ERROR)


if __name__ == "__main__":
    unittest.main()
