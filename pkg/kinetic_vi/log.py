"""
Logging setup
日志配置
"""

import os
import sys

from loguru import logger


def configure_logging(level: str = None, serialize: bool = False) -> None:
    """Install a single stderr sink.

    Args:
        level: loguru level name; falls back to SKM_LOG_LEVEL, then WARNING
        serialize: emit JSON records instead of text
    """
    level = (level or os.environ.get("SKM_LOG_LEVEL") or "WARNING").upper()
    logger.remove()
    logger.add(
        sys.stderr,
        level=level,
        serialize=serialize,
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {name}:{function} - {message}",
    )
