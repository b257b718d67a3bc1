# mlaforge/attention/rope_variant.py
from typing import Optional

import numpy as np

from ..linalg import matmul
from ..rope import apply_rope
from .base_variant import AttentionTap, AttentionVariant
from .cache import KvCache
from .weights import AttentionWeights


class RopeAttention(AttentionVariant):
    """
    Unconverted MHA/GQA attention. RoPE is applied to the subspaces of the
    weights' selection, so the same code serves the full and partial paths.
    """

    def __init__(self, name: str = "full", description: str = "Full-RoPE multi-head / grouped-query attention"):
        super().__init__(
            name=name,
            description=description,
            weight_variants=("mha_full", "mha_partial"),
            cache_kinds=("full",),
        )

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
        d_h = cfg.d_h
        spectrum = weights.spectrum
        sel = weights.selection

        q = matmul(h, tensors["Wq"])
        k = matmul(h, tensors["Wk"])
        v = matmul(h, tensors["Wv"])
        if tap is not None:
            tap.observe_qk(layer, q, k)

        k_rot = np.concatenate(
            [apply_rope(k[:, g * d_h:(g + 1) * d_h], positions, spectrum, sel.subspaces(layer, g)) for g in range(cfg.n_g)],
            axis=1,
        )
        cache.append(layer, k=k_rot, v=v)
        keys = cache.keys(layer)
        values = cache.values(layer)

        scores = []
        for head in range(cfg.n_h):
            g = cfg.group_of(head)
            q_rot = apply_rope(q[:, head * d_h:(head + 1) * d_h], positions, spectrum, sel.subspaces(layer, g))
            key_block = np.ascontiguousarray(keys[:, g * d_h:(g + 1) * d_h].T)
            scores.append(matmul(q_rot, key_block))
        probs = self.causal_heads(weights, positions, scores, tap)

        heads = []
        for head, p in enumerate(probs):
            g = cfg.group_of(head)
            heads.append(matmul(p, values[:, g * d_h:(g + 1) * d_h]))
        return matmul(np.concatenate(heads, axis=1), tensors["Wo"])
