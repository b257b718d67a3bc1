# mlaforge/rope/base_strategy.py
from abc import ABC, abstractmethod
from typing import Any, Optional

from .rotary import RopeSelection
from ..utils.errors import RankError


class BaseStrategy(ABC):
    """
    Base class for every full-to-partial RoPE selection strategy.
    """

    requires_stats = False

    def __init__(self, name: str, description: str):
        self.name = name
        self.description = description

    @abstractmethod
    def select(self, cfg: Any, r: Optional[int] = None, stats: Optional[Any] = None) -> RopeSelection:
        """
        Build the retained-subspace selection for every layer and kv group of cfg.
        """
        pass

    @staticmethod
    def check_rank(r: int, d_h: int) -> None:
        if not 0 <= r <= d_h // 2:
            raise RankError(f"r={r} outside [0, d_h/2={d_h // 2}]")
