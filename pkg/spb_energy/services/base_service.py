"""Base service class for handling output paths."""

from pathlib import Path
from typing import Optional

from rich.console import Console

from spb_energy.core.paths import get_runs_dir


class BaseService:
    def __init__(self, console: Optional[Console] = None, output_dir: Optional[Path] = None):
        """Initialize base service.

        Args:
            console: Rich console for output (optional)
            output_dir: Directory for run outputs (defaults to the data directory)
        """
        self.console = console or Console()
        self.output_dir = Path(output_dir) if output_dir is not None else get_runs_dir()

    def ensure_output_dir(self, directory: Optional[Path] = None) -> Path:
        """Create the output directory on first use.

        Nothing is created before a run succeeds, so a failed run leaves no
        partial output behind.

        Returns
        -------
            Path to the directory
        """
        directory = Path(directory) if directory is not None else self.output_dir
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    def get_output_file(self, filename: str, directory: Optional[Path] = None) -> Path:
        """Get path to an output file, creating its directory.

        Args:
            filename: Name of the file
            directory: Directory overriding the service's output directory

        Returns
        -------
            Path to the file
        """
        return self.ensure_output_dir(directory) / filename
