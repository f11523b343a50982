"""UI components for displaying reports, balances and offers."""

from typing import Dict, Iterable, Sequence

import pandas as pd
from rich.console import Console
from rich.table import Table

from spb_energy.core.energy_market import Offer
from spb_energy.core.metrics import MetricsReport


def _fmt(value, digits: int = 2) -> str:
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return "[dim]n/a[/dim]"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def show_report(report: MetricsReport, console: Console):
    """Display the aggregates of a metrics report."""
    table = Table(title=f"{report.protocol.upper()} · {report.scenario}")
    table.add_column("Metric", style="bold")
    table.add_column("Value", style="green", justify="right")

    delay_s = None if report.mean_e2e_delay_ms is None else report.mean_e2e_delay_ms / 1000
    table.add_row("Trades", str(report.trade_count))
    table.add_row("Replicates", str(report.replicates))
    table.add_row("Mean end-to-end delay (s)", _fmt(delay_s))
    table.add_row("Per-trade consumer cost", _fmt(report.per_trade_consumer_cost))
    table.add_row("Completion time (min)", _fmt(report.completion_time_min))
    table.add_row("Chain size (KB)", _fmt(report.chain_size_bytes / 1024, 1))
    table.add_row("On-chain transactions", str(report.onchain_tx_count))
    for result, count in sorted(report.counts.items()):
        table.add_row(f"Result: {result}", str(count))

    console.print(table)


def show_comparison(table_data: pd.DataFrame, console: Console, a_name: str, b_name: str):
    """Display a comparison table produced by ``metrics.compare``."""
    table = Table(title=f"{a_name} vs {b_name}")
    table.add_column("Metric", style="bold")
    table.add_column(a_name, justify="right")
    table.add_column(b_name, justify="right")
    table.add_column("Result", style="bold cyan", justify="right")
    for _, row in table_data.iterrows():
        table.add_row(row["metric"], _fmt(row["a"]), _fmt(row["b"]), _fmt(row["value"], 3))

    console.print(table)


def show_offers(offers: Sequence[Offer], console: Console):
    table = Table(title="Energy Offers")
    table.add_column("Producer", style="bold")
    table.add_column("Energy (kWh)", justify="right")
    table.add_column("Price / kWh", justify="right", style="green")
    table.add_column("Negotiable", justify="center")
    for offer in offers:
        table.add_row(
            offer.producer.hex(),
            str(offer.energy),
            str(offer.price_per_kwh),
            "[green]yes[/green]" if offer.negotiable else "[dim]no[/dim]",
        )
    if not offers:
        console.print("[yellow]No offers match[/yellow]")
        return

    console.print(table)


def show_balances(rows: Iterable[Dict], console: Console):
    """Display account balances; each row has name, address, available, held."""
    table = Table(title="Balances")
    table.add_column("Account", style="bold")
    table.add_column("Address", style="dim")
    table.add_column("Available", justify="right", style="green")
    table.add_column("Held", justify="right", style="yellow")
    for row in rows:
        table.add_row(row["name"], row["address"], str(row["available"]), str(row["held"]))

    console.print(table)


def show_help(commands: Dict[str, str], console: Console):
    """Display session commands help."""
    table = Table(title="Available Commands")
    table.add_column("Command", style="bold")
    table.add_column("Description", style="green")
    for cmd, desc in commands.items():
        table.add_row(cmd, desc)

    console.print(table)
