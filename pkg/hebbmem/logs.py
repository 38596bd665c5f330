#=================================
# setup_logging
#=================================

from __future__ import annotations

#---------------Standard Library---------------
import logging

#---------------Third-Party---------------
from rich.console import Console
from rich.logging import RichHandler


def setup_logging(verbosity: int = 0) -> logging.Logger:
    """One rich handler on stderr for the package logger; -v for DEBUG, -q for WARNING."""
    level = logging.DEBUG if verbosity > 0 else logging.WARNING if verbosity < 0 else logging.INFO
    logger = logging.getLogger("hebbmem")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=True)
    handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
    logger.addHandler(handler)
    logger.setLevel(level)
    logger.propagate = False
    return logger
