"""Utilities for handling system signals."""

import sys

from rich.console import Console


def signal_handler(signum, frame, cleanup_fn):
    """Handle Ctrl+C by flushing what the run produced so far, then exit."""
    console = Console(stderr=True)
    console.print("\n\n[dim]Interrupted, writing partial results...[/dim]")
    cleanup_fn()
    console.print("[bold green]Goodbye![/bold green]")
    sys.exit(130)
