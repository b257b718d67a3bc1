# mlaforge/rope/__init__.py
from .rotary import FreqSpectrum, RopeSelection, apply_rope, rotate_pairs, split_projection, merge_projection
from .band_strategies import select_high, select_low, select_uniform
from .two_norm_strategy import select_two_norm
from .base_strategy import BaseStrategy
from .strategy_registry import StrategyRegistry, registry

__all__ = [
    "FreqSpectrum", "RopeSelection", "apply_rope", "rotate_pairs", "split_projection", "merge_projection",
    "select_high", "select_low", "select_uniform", "select_two_norm",
    "BaseStrategy", "StrategyRegistry", "registry",
]
