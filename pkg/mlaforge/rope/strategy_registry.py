# mlaforge/rope/strategy_registry.py
from typing import Dict, Optional

from .base_strategy import BaseStrategy
from .band_strategies import HighFrequencyStrategy, LowFrequencyStrategy, UniformStrategy
from .two_norm_strategy import TwoNormStrategy
from ..utils.errors import UsageError


class StrategyRegistry:
    """
    Registry of the partial-RoPE selection strategies, keyed by CLI name.
    """

    def __init__(self):
        self.strategies: Dict[str, BaseStrategy] = {}
        self._initialize_strategies()

    def _initialize_strategies(self):
        """Register the four built-in strategies."""
        self.register_strategy("high", HighFrequencyStrategy())
        self.register_strategy("low", LowFrequencyStrategy())
        self.register_strategy("uniform", UniformStrategy())
        self.register_strategy("two_norm", TwoNormStrategy())

    def register_strategy(self, key: str, strategy: BaseStrategy):
        self.strategies[key] = strategy

    def get_strategy(self, key: str) -> Optional[BaseStrategy]:
        return self.strategies.get(key)

    def get_all_strategies(self) -> Dict[str, BaseStrategy]:
        return self.strategies.copy()

    def resolve(self, key: str) -> BaseStrategy:
        strategy = self.get_strategy(key)
        if strategy is None:
            raise UsageError(f"Unknown strategy '{key}'. Valid strategies: {sorted(self.strategies)}")
        return strategy


registry = StrategyRegistry()
