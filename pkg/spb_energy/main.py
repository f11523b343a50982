"""Main entry point for the energy trading simulator."""

import argparse
import logging
import signal
import sys
from pathlib import Path
from typing import List, Optional

from rich.console import Console

from spb_energy.core.config import ExperimentConfig
from spb_energy.core.constants import (
    EXIT_CHECK_FAILED,
    EXIT_CONFIG_ERROR,
    EXIT_FAILURE,
    EXIT_OK,
)
from spb_energy.core.exceptions import ConfigError, SpbError
from spb_energy.core.logging_config import configure_logging
from spb_energy.core.paths import get_session_history_path
from spb_energy.core.signal_handlers import signal_handler
from spb_energy.services.experiment_service import SCENARIOS, ExperimentService
from spb_energy.services.session_service import SessionService

logger = logging.getLogger(__name__)


#######################
# Argument parsing #
#######################


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spb",
        description="Simulate peer-to-peer energy trading with atomic meta-transactions",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a scenario and write its report")
    run.add_argument("--scenario", choices=SCENARIOS, default="reliable")
    run.add_argument("--protocol", choices=("spb", "baseline"), default=None)
    run.add_argument("--config", type=Path, default=None, help="key=value config file")
    run.add_argument("--out", type=Path, default=None, help="Path of metrics.json")
    run.add_argument("--seed", type=int, default=None, help="Override the config seed")

    compare = sub.add_parser("compare", help="Compare two metrics reports")
    compare.add_argument("report_a", type=Path)
    compare.add_argument("report_b", type=Path)
    compare.add_argument("--out", type=Path, default=None, help="Path of the comparison CSV")
    compare.add_argument("--check", action="store_true", help="Check the calibration bands")

    session = sub.add_parser("session", help="Interactive or scripted trading session")
    session.add_argument("--config", type=Path, default=None)
    session.add_argument("--script", type=Path, default=None, help="File of session commands")
    session.add_argument("--no-history", action="store_true", help="Do not record commands")

    ctp = sub.add_parser("ctp", help="Commit to pay a producer in a fresh session")
    ctp.add_argument("tx_addr")
    ctp.add_argument("tx_amount")
    ctp.add_argument("tx_energy")
    ctp.add_argument("--config", type=Path, default=None)

    erc = sub.add_parser("erc", help="Confirm energy receipt in a fresh session")
    erc.add_argument("ctp_id")
    erc.add_argument("energy_amount")
    erc.add_argument("--config", type=Path, default=None)

    config = sub.add_parser("config", help="Write the default configuration")
    config.add_argument("--out", type=Path, required=True)

    return parser


def load_config(path: Optional[Path], seed: Optional[int] = None) -> ExperimentConfig:
    config = ExperimentConfig.from_file(path) if path is not None else ExperimentConfig()
    if seed is not None:
        config = config.with_overrides(seed=seed)
    return config


#######################
# Commands #
#######################


def cmd_run(args, console: Console) -> int:
    config = load_config(args.config, args.seed)
    service = ExperimentService(config, console)
    service.run(args.scenario, args.protocol, args.out)
    return EXIT_OK


def cmd_compare(args, console: Console) -> int:
    service = ExperimentService(ExperimentConfig(), console)
    _, failures = service.compare_reports(args.report_a, args.report_b, args.out, args.check)
    return EXIT_CHECK_FAILED if failures else EXIT_OK


def cmd_session(args, console: Console) -> int:
    history = None if args.no_history else get_session_history_path()
    session = SessionService(load_config(args.config), console, history_file=history)
    if args.script is not None:
        if not args.script.is_file():
            raise ConfigError(f"Script not found: {args.script}")
        session.run_script(args.script.read_text(encoding="utf-8").splitlines())
        return EXIT_OK
    signal.signal(signal.SIGINT, lambda s, f: signal_handler(s, f, session.save_history))
    session.repl()
    return EXIT_OK


def cmd_ctp(args, console: Console) -> int:
    session = SessionService(load_config(args.config), console)
    session.execute(f"ctp {args.tx_addr} {args.tx_amount} {args.tx_energy}")
    return EXIT_FAILURE if session.last_error else EXIT_OK


def cmd_erc(args, console: Console) -> int:
    session = SessionService(load_config(args.config), console)
    session.execute(f"erc {args.ctp_id} {args.energy_amount}")
    return EXIT_FAILURE if session.last_error else EXIT_OK


def cmd_config(args, console: Console) -> int:
    path = ExperimentConfig().save(args.out)
    console.print(f"[green]✓ Default configuration written to {path}[/green]")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "session": cmd_session,
    "ctp": cmd_ctp,
    "erc": cmd_erc,
    "config": cmd_config,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Start the energy trading simulator."""
    args = build_parser().parse_args(argv)
    console = Console()
    err_console = Console(stderr=True)
    configure_logging(-1 if args.quiet else (1 if args.verbose else 0), err_console)

    try:
        logger.debug("Running command %s", args.command)
        return COMMANDS[args.command](args, console)
    except ConfigError as e:
        err_console.print(f"[red]Error [{e.code}]: {e.message}[/red]")
        return EXIT_CONFIG_ERROR
    except SpbError as e:
        err_console.print(f"[red]Error [{e.code}]: {e.message}[/red]")
        return EXIT_FAILURE
    except FileNotFoundError as e:
        err_console.print(f"[red]Error: {e}[/red]")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
