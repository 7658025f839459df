"""Logging setup"""

import sys
from pathlib import Path
from typing import Optional, Union

from loguru import logger

LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {message}"


def configure_logging(level: str = "INFO", logfile: Optional[Union[str, Path]] = None) -> None:
    """Human-readable logs go to stderr (and optionally a file), never to stdout"""
    logger.remove()
    logger.add(sys.stderr, format=LOG_FORMAT, level=level.upper(), colorize=None)
    if logfile is not None:
        logger.add(str(logfile), format="{message}", mode="a", level=level.upper())
