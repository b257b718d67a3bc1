# mlaforge/rope/two_norm_strategy.py
from typing import Any, List, Optional

import numpy as np

from .base_strategy import BaseStrategy
from .rotary import RopeSelection
from ..utils.errors import RankError, StatsSchemaError, UsageError


def top_r(scores: np.ndarray, r: int) -> List[int]:
    """Indices of the r largest scores, ties going to the smaller index, returned sorted."""
    if r > scores.shape[-1]:
        raise RankError(f"r={r} exceeds the {scores.shape[-1]} available subspaces")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return sorted(int(k) for k in order[:r])


def select_two_norm(stats: Any, r: int, global_selection: bool = False) -> RopeSelection:
    """
    Per layer and kv group, keep the r subspaces with the largest mean
    2-norm contribution. With global_selection one set, ranked on scores
    averaged over layers and groups, is used everywhere.
    """
    scores = np.asarray(stats.scores, dtype=np.float64)
    if scores.ndim != 3:
        raise RankError(f"two_norm scores must be [layer][group][subspace], got shape {scores.shape}")
    n_layers, n_g, n_sub = scores.shape
    if r < 0:
        raise RankError(f"r={r} must be nonnegative")
    d_h = 2 * n_sub
    if global_selection:
        chosen = top_r(scores.mean(axis=(0, 1)), r)
        return RopeSelection.replicated("two_norm", chosen, d_h, n_layers, n_g)
    sets = [[top_r(scores[layer, group], r) for group in range(n_g)] for layer in range(n_layers)]
    return RopeSelection(strategy="two_norm", d_h=d_h, sets=sets)


class TwoNormStrategy(BaseStrategy):
    """
    Data-driven strategy ranking subspaces by their head-wise 2-norm
    contribution, an upper bound on their share of the attention logits.
    """

    requires_stats = True

    def __init__(self):
        super().__init__(
            name="two_norm",
            description="Keep RoPE on the r subspaces with the largest mean |q_k|*|k_k| per kv group",
        )

    def select(self, cfg: Any, r: Optional[int] = None, stats: Optional[Any] = None) -> RopeSelection:
        if stats is None:
            raise UsageError("The two_norm strategy needs 2-norm statistics (run `stats` first)")
        r = cfg.r if r is None else r
        scores = np.asarray(stats.scores)
        if scores.shape != (cfg.n_layers, cfg.n_g, cfg.d_h // 2):
            raise StatsSchemaError(
                f"statistics shape {scores.shape} does not match the model "
                f"({cfg.n_layers}, {cfg.n_g}, {cfg.d_h // 2})"
            )
        return select_two_norm(stats, r, global_selection=cfg.global_selection)
