"""Service layer for running experiments and writing their reports."""

import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd
from rich.console import Console

from spb_energy.core.config import ExperimentConfig
from spb_energy.core.constants import (
    CHAIN_FILE,
    COMPARISON_FILE,
    EVENTS_FILE,
    METRICS_FILE,
    TRACE_FILE,
    TRADES_FILE,
)
from spb_energy.core.crypto import digest
from spb_energy.core.exceptions import RunIntegrityError
from spb_energy.core.metrics import MetricsReport, OutcomeRow, check_acceptance, compare
from spb_energy.core.simchain import chain_size_bytes, export_jsonl
from spb_energy.core.trade_protocol import TradeOutcome, TradeRequest, run_batch, run_trade
from spb_energy.core.ui_components import show_comparison, show_report
from spb_energy.core.world import World, build_world
from spb_energy.services.base_service import BaseService

logger = logging.getLogger(__name__)

SCENARIOS = ("reliable", "unreliable", "batch")


@dataclass
class ExperimentRun:
    report: MetricsReport
    world: World
    trace_lines: List[str] = field(default_factory=list)
    event_lines: List[str] = field(default_factory=list)


class ExperimentService(BaseService):
    def __init__(
        self,
        config: ExperimentConfig,
        console: Optional[Console] = None,
        output_dir: Optional[Path] = None,
    ):
        """Initialize experiment service.

        Args:
            config: Experiment configuration
            console: Rich console for output (optional)
            output_dir: Parent directory of run outputs (optional)
        """
        super().__init__(console, output_dir)
        self.config = config

    @property
    def ceiling(self) -> Optional[int]:
        """Price ceiling per kWh consumers negotiate up to, None to pay as listed."""
        return self.config.consumer_ceiling_per_kwh or None

    #######################
    # Scenarios
    #######################

    def replicate(
        self, protocol: str, index: int, reliable: bool = True
    ) -> Tuple[TradeOutcome, World]:
        """Run one trade on a fresh world seeded with ``seed + index``.

        The trade starts at a random phase of the mining period.
        """
        config = self.config.with_overrides(seed=self.config.seed + index)
        world = build_world(config, protocol)
        phase = random.Random(f"{config.seed}:phase").randrange(config.mining_period_ms)
        outcome = run_trade(
            world,
            consumer=index % config.consumers,
            producer=index % config.producers,
            reliable=reliable,
            start_at=world.ready_at + phase,
            ceiling=self.ceiling,
        )
        self.check_world(world)
        return outcome, world

    def run_replicates(
        self, protocol: str, reliable: bool, count: Optional[int] = None
    ) -> Tuple[List[TradeOutcome], List[World]]:
        outcomes, worlds = [], []
        for i in range(count if count is not None else self.config.replicates):
            outcome, world = self.replicate(protocol, i, reliable)
            outcomes.append(outcome)
            worlds.append(world)
        return outcomes, worlds

    def run_batch(self, protocol: str) -> Tuple[List[TradeOutcome], World]:
        """Trades arriving every ``trade_interval_ms`` on one shared world."""
        config = self.config
        world = build_world(config, protocol)
        requests = [
            TradeRequest(
                consumer=i % config.consumers,
                producer=i % config.producers,
                amount=config.trade_amount,
                energy=config.trade_energy,
                start_at=world.ready_at + i * config.trade_interval_ms,
                ceiling=self.ceiling,
            )
            for i in range(config.trade_count)
        ]
        outcomes = run_batch(world, requests)
        self.check_world(world)
        return outcomes, world

    def check_world(self, world: World):
        """Refuse to report on a world whose chain or money supply is corrupt.

        Raises
        ------
            RunIntegrityError: on a chain validation failure or a supply mismatch
        """
        verdict = world.validate()
        if not verdict:
            raise RunIntegrityError(
                f"Chain failed validation at height {verdict.height}: {verdict.reason}"
            )
        supply = world.ledger.total_supply()
        if supply != world.initial_supply:
            raise RunIntegrityError(
                f"Currency not conserved: {supply} != {world.initial_supply}"
            )

    def run_experiment(self, scenario: str = "batch", protocol: Optional[str] = None) -> ExperimentRun:
        """Run a scenario and aggregate its report.

        Args:
            scenario: "reliable", "unreliable" or "batch"
            protocol: "spb" or "baseline" (defaults to the config's protocol)

        Returns
        -------
            ExperimentRun with the report and the main world's traces
        """
        if scenario not in SCENARIOS:
            raise ValueError(f"Unknown scenario '{scenario}'")
        protocol = protocol or self.config.protocol
        logger.info("Running %s scenario with the %s protocol", scenario, protocol)

        if scenario == "batch":
            outcomes, world = self.run_batch(protocol)
            timing_runs, timing_worlds = self.run_replicates(protocol, reliable=True)
            digests = [world.net.trace_digest()] + [w.net.trace_digest() for w in timing_worlds]
            trace_lines = []
            for record in world.ctx.records:
                trace_lines.append(f"# trade {record.index}")
                trace_lines.extend(world.ctx.trace.lines(record.index))
        else:
            outcomes, worlds = self.run_replicates(protocol, reliable=scenario == "reliable")
            timing_runs = []
            world = worlds[0]
            digests = [w.net.trace_digest() for w in worlds]
            trace_lines = world.ctx.trace.lines()

        report = MetricsReport.from_outcomes(
            protocol=protocol,
            scenario=scenario,
            seed=self.config.seed,
            replicates=self.config.replicates,
            outcomes=[OutcomeRow.from_outcome(o) for o in outcomes],
            chain_size_bytes=chain_size_bytes(world.chain),
            trace_digest=digest("\n".join(digests).encode("utf-8")).hex(),
            delay_outcomes=[OutcomeRow.from_outcome(o) for o in timing_runs],
            throughput=scenario == "batch",
        )
        return ExperimentRun(
            report=report,
            world=world,
            trace_lines=trace_lines,
            event_lines=world.net.trace_lines(),
        )

    #######################
    # Outputs
    #######################

    def default_metrics_path(self, scenario: str, protocol: str) -> Path:
        return self.output_dir / f"{protocol}-{scenario}-seed{self.config.seed}" / METRICS_FILE

    def write_outputs(self, run: ExperimentRun, metrics_path: Optional[Path] = None) -> Dict[str, Path]:
        """Write metrics.json and its sibling files.

        Returns
        -------
            Mapping of output kind to written path
        """
        report = run.report
        metrics_path = Path(metrics_path or self.default_metrics_path(report.scenario, report.protocol))
        directory = self.ensure_output_dir(metrics_path.parent)

        paths = {"metrics": report.save(metrics_path)}
        paths["trades"] = self.get_output_file(TRADES_FILE, directory)
        report.trades_frame().to_csv(paths["trades"], index=False)
        paths["trace"] = self.get_output_file(TRACE_FILE, directory)
        paths["trace"].write_text("\n".join(run.trace_lines) + "\n", encoding="utf-8")
        paths["events"] = self.get_output_file(EVENTS_FILE, directory)
        paths["events"].write_text("\n".join(run.event_lines) + "\n", encoding="utf-8")
        paths["chain"] = export_jsonl(run.world.chain, directory / CHAIN_FILE)
        return paths

    def run(
        self, scenario: str, protocol: Optional[str] = None, metrics_path: Optional[Path] = None
    ) -> ExperimentRun:
        """Run a scenario, write its outputs and show the summary."""
        with self.console.status(f"[dim]Simulating {scenario} scenario...[/dim]"):
            run = self.run_experiment(scenario, protocol)
        paths = self.write_outputs(run, metrics_path)
        show_report(run.report, self.console)
        self.console.print(f"[green]✓ Report written to {paths['metrics']}[/green]")
        return run

    def compare_reports(
        self,
        a_path: Path,
        b_path: Path,
        out: Optional[Path] = None,
        check: bool = False,
    ) -> Tuple[pd.DataFrame, List[str]]:
        """Compare two saved reports, optionally checking the calibration bands.

        Returns
        -------
            Comparison table and the list of failed acceptance checks
        """
        a = MetricsReport.load(a_path)
        b = MetricsReport.load(b_path)
        table = compare(a, b)
        out = Path(out) if out is not None else Path(a_path).parent / COMPARISON_FILE
        self.ensure_output_dir(out.parent)
        table.to_csv(out, index=False)
        show_comparison(table, self.console, a.protocol, b.protocol)
        self.console.print(f"[dim]Comparison written to {out}[/dim]")

        failures = check_acceptance(table) if check else []
        for failure in failures:
            self.console.print(f"[red]✗ {failure}[/red]")
        if check and not failures:
            self.console.print("[green]✓ All acceptance checks passed[/green]")
        return table, failures
