# mlaforge/utils/logger.py
import json
import logging
import sys
import time
from typing import Any, Dict, Optional


def setup_logger(name: str = "mlaforge", level: int = logging.INFO) -> logging.Logger:
    """
    Set up the package logger. Records go to stderr so that JSON written to
    stdout by the CLI stays parseable.
    """
    logger = logging.getLogger(name)

    # Avoid duplicate handlers
    if logger.handlers:
        logger.setLevel(level)
        return logger

    logger.setLevel(level)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.DEBUG)

    formatter = logging.Formatter(
        '%(asctime)s | %(name)s | %(levelname)s | %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    console_handler.setFormatter(formatter)

    logger.addHandler(console_handler)
    return logger


def get_logger(name: str = "mlaforge") -> logging.Logger:
    """Get the configured logger."""
    return logging.getLogger(name)


class StageLogger:
    """
    Structured logger for one pipeline stage (calibration, conversion,
    verification). Every line carries the run id so interleaved stages can
    be told apart.
    """

    def __init__(self, stage_name: str):
        self.stage_name = stage_name
        self.logger = get_logger(f"mlaforge.stage.{stage_name.lower().replace(' ', '_')}")
        self.run_id = int(time.time() * 1000)

    def log_stage_start(self, details: Optional[Dict[str, Any]] = None):
        """Log the start of a stage with its parameters."""
        self.logger.info(f"🚀 {self.stage_name.upper()} STARTED [Run-{self.run_id}]")
        if details:
            self.logger.info(f"   📋 Parameters: {json.dumps(details, sort_keys=True, default=str)}")

    def log_selection(self, layer: int, group_sets: Any, strategy: str):
        """Log the retained RoPE subspaces of one layer."""
        self.logger.info(f"🎯 RoPE selection [Run-{self.run_id}] layer={layer} strategy={strategy}")
        self.logger.debug(f"   Retained subspaces per kv group: {group_sets}")

    def log_factorization(self, layer: int, mode: str, rank: int, discarded_sq_sum: float):
        """Log the outcome of one layer's low-rank factorization."""
        self.logger.info(
            f"🧮 Factorized [Run-{self.run_id}] layer={layer} mode={mode} "
            f"rank={rank} discarded_sq_sum={discarded_sq_sum:.6e}"
        )

    def log_link(self, name: str, max_abs: float, tolerance: float, passed: bool, enforced: bool = True):
        """Log one equivalence link of the verification chain."""
        status = "✅ PASS" if passed else ("❌ FAIL" if enforced else "📝 REPORT")
        self.logger.info(
            f"🔗 Link {name} [Run-{self.run_id}]: max|delta|={max_abs:.3e} tol={tolerance:.1e} -> {status}"
        )

    def log_stage_complete(self, elapsed_ms: float):
        """Log when a stage completes."""
        self.logger.info(f"✅ {self.stage_name.upper()} COMPLETED [Run-{self.run_id}]")
        self.logger.info(f"   ⏱️ Execution time: {elapsed_ms:.2f}ms")

    def log_error(self, error: Exception, context: str = ""):
        """Log errors with context."""
        self.logger.error(f"❌ ERROR in {self.stage_name} [Run-{self.run_id}]")
        if context:
            self.logger.error(f"   🔍 Context: {context}")
        self.logger.error(f"   💥 Error: {str(error)}")
