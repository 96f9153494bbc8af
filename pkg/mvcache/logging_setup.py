"""Logging setup - one place that configures the root logger.

The level comes from the FS_LOG environment variable (DEBUG, INFO,
WARNING, ERROR; default WARNING).
"""

import logging
import os
from typing import Optional

LOG_ENV = "FS_LOG"
DEFAULT_LEVEL = "WARNING"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
_LEVELS = {"DEBUG": logging.DEBUG, "INFO": logging.INFO, "WARNING": logging.WARNING, "ERROR": logging.ERROR}

_configured = False


def resolve_level(value: Optional[str]) -> int:
    """Level for a name; unknown names fall back to WARNING."""
    if value is None:
        return _LEVELS[DEFAULT_LEVEL]
    return _LEVELS.get(value.strip().upper(), _LEVELS[DEFAULT_LEVEL])


def configure_logging(level: Optional[str] = None, force: bool = False) -> int:
    """Configure the root logger once.

    Args:
        level: Level name; FS_LOG is used when None
        force: Reconfigure even if already configured

    Returns:
        The numeric level in effect
    """
    global _configured
    name = level if level is not None else os.environ.get(LOG_ENV)
    numeric = resolve_level(name)
    if _configured and not force:
        logging.getLogger().setLevel(numeric)
        return numeric
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)
    _configured = True
    if name is not None and name.strip().upper() not in _LEVELS:
        logging.getLogger(__name__).warning(f"Unknown {LOG_ENV} level '{name}', using {DEFAULT_LEVEL}")
    return numeric
