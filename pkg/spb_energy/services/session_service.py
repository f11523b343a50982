"""Interactive and scripted sessions driving one simulated world by hand.

The session plays consumer 0 and its smart meter. ``ctp`` commits to pay a
producer, ``negotiate`` agrees on a price over the overlay before doing so,
``erc`` makes the meter confirm a delivery. Time only moves when a command
waits for a reply or the user advances it.
"""

import logging
import shlex
from datetime import datetime
from pathlib import Path
from typing import Callable, List, Optional

from rich.console import Console

from spb_energy.core.config import ExperimentConfig
from spb_energy.core.constants import SESSION_COMMANDS
from spb_energy.core.crypto import Address, Hash
from spb_energy.core.exceptions import SessionError, SpbError
from spb_energy.core.overlay import AgreedPrice
from spb_energy.core.trade_protocol import (
    ConsumerPhase,
    TradeRecord,
    negotiate_price,
)
from spb_energy.core.ui_components import show_balances, show_help, show_offers
from spb_energy.core.world import build_world

logger = logging.getLogger(__name__)


def parse_hex(value: str, length: Optional[int] = None) -> bytes:
    text = value[2:] if value.lower().startswith("0x") else value
    try:
        raw = bytes.fromhex(text)
    except ValueError:
        raise SessionError(f"'{value}' is not a hex string") from None
    if length is not None and len(raw) != length:
        raise SessionError(f"Expected {length} bytes, got {len(raw)}")
    return raw


def parse_int(value: str, name: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise SessionError(f"{name} must be an integer, got '{value}'") from None


class SessionService:
    def __init__(
        self,
        config: ExperimentConfig,
        console: Optional[Console] = None,
        history_file: Optional[Path] = None,
    ):
        """Initialize a session on a fresh SPB world.

        Args:
            config: Experiment configuration
            console: Rich console for output (optional)
            history_file: File the executed commands are appended to (optional)
        """
        self.console = console or Console()
        self.config = config
        self.world = build_world(config, "spb", auto_confirm=False)
        self.consumer = self.world.consumers[0]
        self.meter = self.world.meters[0]
        self.history_file = history_file
        self.history: List[str] = []
        # Code of the error the last command reported, None when it succeeded
        self.last_error: Optional[str] = None
        self.commands = {
            "ctp": self.cmd_ctp,
            "negotiate": self.cmd_negotiate,
            "erc": self.cmd_erc,
            "offers": self.cmd_offers,
            "balance": self.cmd_balance,
            "advance": self.cmd_advance,
            "mine": self.cmd_mine,
            "help": self.cmd_help,
        }

    @property
    def net(self):
        return self.world.net

    def _reply_window(self) -> int:
        return self.net.now + 4 * self.net.latency.max_delay + 1

    def resolve_address(self, value: str) -> Address:
        """Accept a hex address or a node name such as producer-1."""
        for node in self.world.producers + self.world.consumers:
            if node.node_id == value:
                return node.address
        return Address(parse_hex(value, 20))

    #######################
    # Commands
    #######################

    def cmd_ctp(self, args: List[str]):
        if len(args) != 3:
            raise SessionError("usage: ctp <addr> <amount> <energy>")
        producer = self.resolve_address(args[0])
        amount = parse_int(args[1], "amount")
        energy = parse_int(args[2], "energy")
        self._commit(producer, amount, energy)

    def _commit(
        self, producer: Address, amount: int, energy: int, record: Optional[TradeRecord] = None
    ):
        ctp = self.consumer.commit(producer, amount, energy, record=record)
        self.net.run_while(
            lambda: self.consumer.phase(ctp.id) == ConsumerPhase.IDLE, self._reply_window()
        )
        record = self.world.ctx.record_for(ctp.id)
        if self.consumer.phase(ctp.id) == ConsumerPhase.REJECTED:
            self.console.print(f"[red]Error [{record.error}]: CTP refused by the miner[/red]")
            self.last_error = record.error
            return
        self.console.print(f"[green]✓ CTP {ctp.id.hex()} pending[/green]")
        self.console.print(
            f"[dim]held {amount}, expires at t={ctp.expiry_time} ms (now t={self.net.now})[/dim]"
        )

    def cmd_erc(self, args: List[str]):
        if len(args) != 2:
            raise SessionError("usage: erc <ctp_id> <energy>")
        ctp_id = Hash(parse_hex(args[0], 32))
        energy = parse_int(args[1], "energy")
        if ctp_id not in self.meter.received:
            self.console.print("[yellow]Warning: the meter has not recorded this delivery[/yellow]")
        self.meter.confirm(ctp_id, energy)
        self.net.run_while(lambda: ctp_id not in self.meter.results, self._reply_window())
        result = self.meter.results.get(ctp_id)
        if result is None:
            self.console.print("[yellow]Warning: no answer from the miner yet[/yellow]")
            self.last_error = "NO_ANSWER"
        elif result.accepted:
            self.console.print(
                f"[green]✓ ERC accepted, settlement of {ctp_id.hex()[:16]} is queued for "
                f"block at t={self.world.miner.next_tick_at}[/green]"
            )
        else:
            self.console.print(f"[red]Error [{result.code}]: {result.detail}[/red]")
            self.last_error = result.code

    def cmd_negotiate(self, args: List[str]):
        if len(args) != 3:
            raise SessionError("usage: negotiate <addr> <energy> <max_price>")
        producer = self.resolve_address(args[0])
        energy = parse_int(args[1], "energy")
        ceiling = parse_int(args[2], "max_price")
        if energy <= 0 or ceiling <= 0:
            raise SessionError("energy and max_price must be positive")
        record = self.world.ctx.add_record(
            TradeRecord(
                index=0,
                protocol="spb",
                consumer=self.consumer.address,
                producer=producer,
                amount=0,
                energy=energy,
                ceiling=ceiling,
            )
        )
        result = negotiate_price(self.world.ctx, record)
        if result is None:
            self.console.print(f"[red]Error [{record.error}]: negotiation could not start[/red]")
            self.last_error = record.error
            return
        for msg in result.transcript:
            self.console.print(f"[dim]{msg.kind.value} {msg.price_per_kwh}/kWh[/dim]")
        if not isinstance(result, AgreedPrice):
            self.console.print(
                f"[red]Error [{record.error}]: no deal after {result.rounds} rounds[/red]"
            )
            self.last_error = record.error
            return
        self.console.print(
            f"[green]✓ Agreed on {result.price_per_kwh}/kWh after {result.rounds} "
            f"round(s), paying {record.amount}[/green]"
        )
        self.net.run_until(self.net.now + result.elapsed_ms)
        self._commit(producer, record.amount, energy, record)

    def cmd_offers(self, args: List[str]):
        min_energy = parse_int(args[0], "min_energy") if args else 0
        max_price = parse_int(args[1], "max_price") if len(args) > 1 else None
        show_offers(self.world.market.query_offers(min_energy, max_price), self.console)

    def cmd_balance(self, args: List[str]):
        nodes = self.world.consumers + self.world.producers
        if args:
            address = self.resolve_address(args[0])
            nodes = [n for n in nodes if n.address == address]
            if not nodes:
                raise SessionError(f"No participant with address {address.hex()}")
        rows = []
        for node in nodes:
            state = self.world.ledger.account(node.address)
            rows.append(
                {
                    "name": node.node_id,
                    "address": node.address.hex(),
                    "available": state.available,
                    "held": state.held,
                }
            )
        show_balances(rows, self.console)

    def cmd_advance(self, args: List[str]):
        if len(args) != 1:
            raise SessionError("usage: advance <ms>")
        delta = parse_int(args[0], "ms")
        if delta < 0:
            raise SessionError("Cannot advance by a negative amount")
        self.net.run_until(self.net.now + delta)
        self.console.print(f"[dim]t={self.net.now} ms, chain height {self.world.chain.height}[/dim]")

    def cmd_mine(self, args: List[str]):
        self.net.run_until(self.world.miner.next_tick_at + self.net.latency.max_delay)
        head = self.world.chain.head
        self.console.print(
            f"[dim]t={self.net.now} ms, head block {head.height} "
            f"with {len(head.txs)} txs[/dim]"
        )

    def cmd_help(self, args: List[str]):
        show_help(SESSION_COMMANDS, self.console)

    #######################
    # Loop
    #######################

    def execute(self, line: str) -> bool:
        """Run one command line.

        Returns
        -------
            False when the session should end
        """
        try:
            parts = shlex.split(line, comments=True)
        except ValueError as e:
            self.console.print(f"[red]Error: {e}[/red]")
            return True
        if not parts:
            return True
        name, args = parts[0].lower(), parts[1:]
        logger.debug("t=%d command %s %s", self.net.now, name, args)
        self.history.append(line.strip())
        self.last_error = None
        if name in ("quit", "exit", ":q"):
            return False
        command = self.commands.get(name)
        if command is None:
            self.console.print(f"[red]Unknown command '{name}'. Type help.[/red]")
            self.last_error = "UNKNOWN_COMMAND"
            return True
        try:
            command(args)
        except SpbError as e:
            self.console.print(f"[red]Error [{e.code}]: {e.message}[/red]")
            self.last_error = e.code
        return True

    def run_script(self, lines: List[str]):
        for line in lines:
            if not self.execute(line):
                break
        self.save_history()

    def repl(self, read: Callable[[str], str] = input):
        self.console.print("[bold blue]SPB energy trading session[/bold blue]")
        self.console.print(
            f"[dim]You are {self.consumer.node_id} ({self.consumer.address.hex()}). "
            "Type help for commands.[/dim]"
        )
        try:
            while True:
                try:
                    line = read(f"t={self.net.now}> ")
                except EOFError:
                    break
                if not self.execute(line):
                    break
        finally:
            self.save_history()
        self.console.print("[bold green]Goodbye![/bold green]")

    def save_history(self):
        if self.history_file is None or not self.history:
            return
        path = Path(self.history_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as f:
            f.write(f"# session {datetime.now().isoformat(timespec='seconds')}\n")
            f.write("\n".join(self.history) + "\n")
        self.history = []