# mlaforge/utils/__init__.py
from .logger import setup_logger, get_logger, StageLogger
from .settings import get_log_level, get_thread_count

__all__ = ["setup_logger", "get_logger", "StageLogger", "get_log_level", "get_thread_count"]
