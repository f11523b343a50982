#!/usr/bin/env python3
"""Run the script to summarize a chain export written by ``spb run``."""

import argparse
import json
from pathlib import Path

import pandas as pd
from rich.console import Console
from rich.table import Table

from spb_energy.core.constants import CHAIN_FILE


def load_chain(chain_file) -> pd.DataFrame:
    """Load a chain.jsonl export, one row per block.

    Args:
        chain_file: Path to the export

    Returns
    -------
        DataFrame sorted by height
    """
    with open(chain_file, "r", encoding="utf-8") as f:
        records = [json.loads(line) for line in f if line.strip()]
    if not records:
        raise ValueError(f"{chain_file} holds no blocks")
    return pd.DataFrame(records).sort_values("height").reset_index(drop=True)


def broken_links(blocks: pd.DataFrame) -> list:
    """Heights whose parent hash does not match the previous block."""
    previous = blocks["hash"].shift(1)
    mismatched = blocks.iloc[1:][blocks["parent_hash"].iloc[1:] != previous.iloc[1:]]
    return mismatched["height"].tolist()


def summarize_chain(blocks: pd.DataFrame) -> dict:
    kinds = blocks["tx_kinds"].explode().dropna()
    intervals = blocks["timestamp"].diff().dropna()
    return {
        "blocks": len(blocks),
        "height": int(blocks["height"].max()),
        "transactions": int(blocks["tx_ids"].map(len).sum()),
        "size_bytes": int(blocks["byte_size"].sum()),
        "mean_interval_s": float(intervals.mean() / 1000) if len(intervals) else 0.0,
        "ctp_db_changes": int((blocks["ctp_db_hash"] != blocks["ctp_db_hash"].shift(1)).sum() - 1),
        "kinds": kinds.value_counts().sort_index().to_dict(),
        "broken_links": broken_links(blocks),
    }


def display_summary(summary: dict, console: Console):
    table = Table(title="Chain Summary")
    table.add_column("Information", style="bold")
    table.add_column("Value", style="green", justify="right")
    table.add_row("Blocks", str(summary["blocks"]))
    table.add_row("Height", str(summary["height"]))
    table.add_row("Transactions", str(summary["transactions"]))
    table.add_row("Size", f"{summary['size_bytes'] / 1024:.1f} KB")
    table.add_row("Mean block interval", f"{summary['mean_interval_s']:.1f} s")
    table.add_row("CTP database commitments changed", str(summary["ctp_db_changes"]))
    for kind, count in summary["kinds"].items():
        table.add_row(f"  {kind}", str(count))
    console.print(table)

    if summary["broken_links"]:
        console.print(f"[red]✗ Parent hash mismatch at heights {summary['broken_links']}[/red]")
    else:
        console.print("[green]✓ Parent links intact[/green]")


def main():
    parser = argparse.ArgumentParser(description="Summarize a chain export")
    parser.add_argument(
        "chain_file",
        nargs="?",
        default=CHAIN_FILE,
        help=f"Path to the chain export (default: ./{CHAIN_FILE})",
    )
    args = parser.parse_args()
    console = Console()

    try:
        path = Path(args.chain_file)
        console.print(f"\n[dim]Using chain export: {path}[/dim]\n")
        summary = summarize_chain(load_chain(path))
        display_summary(summary, console)
    except FileNotFoundError as e:
        console.print(f"[red]Error: {e}[/red]")
        return 1
    except (ValueError, KeyError) as e:
        console.print(f"[red]Error: malformed chain export: {e}[/red]")
        return 1

    return 1 if summary["broken_links"] else 0


if __name__ == "__main__":
    exit(main())
