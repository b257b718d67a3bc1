# mlaforge/attention/latent_variant.py
from typing import List, Optional, Tuple

import numpy as np

from ..linalg import matmul
from ..rope import rotate_pairs
from .base_variant import AttentionTap, AttentionVariant
from .cache import KvCache
from .weights import AttentionWeights


class LatentAttention(AttentionVariant):
    """
    Converted attention, naive form: keys and values are re-expanded from the
    cached latent (k_nope = c_kv·Wuk, v = c_kv·Wuv) and the score is the sum of
    the rope and nope parts.
    """

    def __init__(
        self,
        name: str = "mla",
        description: str = "Latent attention with materialized keys and values",
    ):
        super().__init__(
            name=name,
            description=description,
            weight_variants=("mla",),
            cache_kinds=("latent", "quant4", "quant2"),
        )

    def rope_queries(
        self,
        weights: AttentionWeights,
        layer: int,
        h: np.ndarray,
        positions: np.ndarray,
        cache: KvCache,
    ) -> Tuple[List[np.ndarray], np.ndarray, np.ndarray]:
        """
        Rotate the rope queries and keys, append (k_rope, c_kv) for the new rows
        and return (per-head rope queries, cached k_rope, cached c_kv).
        """
        cfg = weights.cfg
        tensors = weights.layers[layer]
        d_r = cfg.d_rope
        thetas = weights.spectrum.thetas

        q_rope = matmul(h, tensors["Wq_rope"])
        k_rope = matmul(h, tensors["Wk_rope"])
        c_kv = matmul(h, tensors["Wdkv"])

        group_thetas = [thetas[weights.selection.subspaces(layer, g)] for g in range(cfg.n_g)]
        k_rot = np.concatenate(
            [rotate_pairs(k_rope[:, g * d_r:(g + 1) * d_r], positions, group_thetas[g]) for g in range(cfg.n_g)],
            axis=1,
        )
        cache.append(layer, k_rope=k_rot, c_kv=c_kv)

        q_heads = [
            rotate_pairs(q_rope[:, head * d_r:(head + 1) * d_r], positions, group_thetas[cfg.group_of(head)])
            for head in range(cfg.n_h)
        ]
        return q_heads, cache.k_rope(layer), cache.c_kv(layer)

    def rope_scores(self, weights: AttentionWeights, head: int, q_rope: np.ndarray, k_rope: np.ndarray) -> np.ndarray:
        d_r = weights.cfg.d_rope
        g = weights.cfg.group_of(head)
        return matmul(q_rope, np.ascontiguousarray(k_rope[:, g * d_r:(g + 1) * d_r].T))

    def attend(
        self,
        weights: AttentionWeights,
        layer: int,
        h: np.ndarray,
        positions: np.ndarray,
        cache: KvCache,
        tap: Optional[AttentionTap] = None,
    ) -> np.ndarray:
        cfg = weights.cfg
        tensors = weights.layers[layer]
        d_c, d_h = cfg.d_nope, cfg.d_h

        q_heads, k_rope, c_kv = self.rope_queries(weights, layer, h, positions, cache)
        q_nope = matmul(h, tensors["Wq_nope"])
        k_nope = matmul(c_kv, tensors["Wuk"])
        values = matmul(c_kv, tensors["Wuv"])

        scores = []
        for head in range(cfg.n_h):
            g = cfg.group_of(head)
            nope = matmul(q_nope[:, head * d_c:(head + 1) * d_c], np.ascontiguousarray(k_nope[:, g * d_c:(g + 1) * d_c].T))
            scores.append(self.rope_scores(weights, head, q_heads[head], k_rope) + nope)
        probs = self.causal_heads(weights, positions, scores, tap)

        heads = [matmul(p, values[:, cfg.group_of(head) * d_h:(cfg.group_of(head) + 1) * d_h]) for head, p in enumerate(probs)]
        return matmul(np.concatenate(heads, axis=1), tensors["Wo"])
