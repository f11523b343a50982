"""Logging setup for the command line."""

import logging

from rich.console import Console
from rich.logging import RichHandler

LOG_FORMAT = "%(message)s"


def configure_logging(verbosity: int = 0, console: Console = None) -> logging.Logger:
    """Install a RichHandler on the package logger.

    Args:
        verbosity: -1 for warnings only, 0 for info, 1 or more for debug
        console: Console the handler writes to (standard error by default)

    Returns
    -------
        The ``spb_energy`` logger
    """
    if verbosity < 0:
        level = logging.WARNING
    elif verbosity == 0:
        level = logging.INFO
    else:
        level = logging.DEBUG

    logger = logging.getLogger("spb_energy")
    logger.handlers.clear()
    logger.addHandler(
        RichHandler(
            console=console or Console(stderr=True),
            show_path=verbosity > 0,
            rich_tracebacks=True,
            markup=False,
        )
    )
    logger.setLevel(level)
    logger.propagate = False
    for handler in logger.handlers:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
    return logger
