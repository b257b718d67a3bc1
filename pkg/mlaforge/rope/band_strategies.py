# mlaforge/rope/band_strategies.py
from typing import Any, Callable, List, Optional

from .base_strategy import BaseStrategy
from .rotary import RopeSelection


def select_high(r: int, d_h: int) -> List[int]:
    """The r fastest-rotating subspaces."""
    BaseStrategy.check_rank(r, d_h)
    return list(range(r))


def select_low(r: int, d_h: int) -> List[int]:
    """The r slowest-rotating subspaces."""
    BaseStrategy.check_rank(r, d_h)
    return list(range(d_h // 2 - r, d_h // 2))


def select_uniform(r: int, d_h: int) -> List[int]:
    """
    r subspaces at equidistant intervals, floor(k * d_h / (2r)).
    When 2r does not divide d_h the gaps are uneven.
    """
    BaseStrategy.check_rank(r, d_h)
    return [(k * d_h) // (2 * r) for k in range(r)]


class BandStrategy(BaseStrategy):
    """
    Data-free strategy: one fixed subspace set shared by every layer, head and group.
    """

    def __init__(self, name: str, description: str, formula: Callable[[int, int], List[int]]):
        super().__init__(name=name, description=description)
        self.formula = formula

    def subspaces(self, r: int, d_h: int) -> List[int]:
        return self.formula(r, d_h)

    def select(self, cfg: Any, r: Optional[int] = None, stats: Optional[Any] = None) -> RopeSelection:
        r = cfg.r if r is None else r
        return RopeSelection.replicated(self.name, self.subspaces(r, cfg.d_h), cfg.d_h, cfg.n_layers, cfg.n_g)


class HighFrequencyStrategy(BandStrategy):
    def __init__(self):
        super().__init__("high", "Keep RoPE on the r highest-frequency subspaces", select_high)


class LowFrequencyStrategy(BandStrategy):
    def __init__(self):
        super().__init__("low", "Keep RoPE on the r lowest-frequency subspaces", select_low)


class UniformStrategy(BandStrategy):
    def __init__(self):
        super().__init__("uniform", "Keep RoPE on r equidistant subspaces across the spectrum", select_uniform)
