"""Utilities for managing application paths and directories."""

import sys
from pathlib import Path

from spb_energy.core.constants import (
    LINUX_DATA_DIR,
    MACOS_DATA_DIR,
    RUNS_DIR_NAME,
    SESSION_HISTORY_FILE,
)


def get_data_dir() -> str:
    """Get the OS-specific data directory for run outputs and session history.

    Returns
    -------
        Path to the data directory
    """
    if sys.platform == "darwin":
        return str(MACOS_DATA_DIR)
    else:
        return str(LINUX_DATA_DIR)


def get_runs_dir() -> Path:
    """Default parent directory of experiment outputs."""
    return Path(get_data_dir()) / RUNS_DIR_NAME


def get_session_history_path() -> Path:
    return Path(get_data_dir()) / SESSION_HISTORY_FILE
