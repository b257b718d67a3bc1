# mlaforge/utils/settings.py
import logging
import os

from dotenv import load_dotenv

load_dotenv()

IS_PRODUCTION = os.getenv("MLAFORGE_ENVIRONMENT", "development") == "production"


def get_log_level() -> int:
    """Resolve the log level from MLAFORGE_LOG_LEVEL, falling back on the environment switch."""
    name = os.getenv("MLAFORGE_LOG_LEVEL")
    if name:
        level = logging.getLevelName(name.upper())
        if isinstance(level, int):
            return level
    return logging.WARNING if IS_PRODUCTION else logging.INFO


def get_thread_count() -> int:
    """Worker cap for the calibration and factorization pools (MLAFORGE_THREADS)."""
    raw = os.getenv("MLAFORGE_THREADS", "1")
    try:
        count = int(raw)
    except ValueError:
        return 1
    return max(1, count)
