# core/logging_setup.py
"""
Structured JSON logging for every solver module.
"""

import logging
import os
import sys
from typing import Optional

from pythonjsonlogger import jsonlogger

ROOT_LOGGER = "hfstruct"
_configured = False


def configure_logging(level: Optional[str] = None, stream=None) -> logging.Logger:
    """
    Install the JSON handler on the package root logger.

    Args:
        level: Logging level name; falls back to HF_LOG_LEVEL, then WARNING
        stream: Output stream, stderr by default

    Returns:
        The package root logger
    """
    global _configured
    root = logging.getLogger(ROOT_LOGGER)
    resolved = (level or os.getenv("HF_LOG_LEVEL") or "WARNING").upper()
    root.setLevel(resolved)

    if not _configured:
        handler = logging.StreamHandler(stream or sys.stderr)
        formatter = jsonlogger.JsonFormatter(
            "%(asctime)s %(name)s %(levelname)s %(message)s"
        )
        handler.setFormatter(formatter)
        root.addHandler(handler)
        root.propagate = False
        _configured = True
    return root


def get_logger(module: str) -> logging.Logger:
    """Named child logger, e.g. get_logger("eigensolver") -> hfstruct.eigensolver"""
    if not _configured:
        configure_logging()
    return logging.getLogger(f"{ROOT_LOGGER}.{module}")
