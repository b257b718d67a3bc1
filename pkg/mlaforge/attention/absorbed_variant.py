# mlaforge/attention/absorbed_variant.py
from typing import Optional

import numpy as np

from ..linalg import matmul
from .base_variant import AttentionTap
from .cache import KvCache
from .latent_variant import LatentAttention
from .weights import AttentionWeights


class AbsorbedAttention(LatentAttention):
    """
    Converted attention with Wuk folded into the nope queries and Wuv into Wo.
    Scores and outputs are taken directly against the cached latent rows;
    k_nope and v are never formed.
    """

    def __init__(self):
        super().__init__(
            name="mla-absorbed",
            description="Latent attention with absorbed query and output products",
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
        width = cfg.latent_width

        q_heads, k_rope, c_kv = self.rope_queries(weights, layer, h, positions, cache)
        c_q = matmul(h, tensors["Wq_absorbed"])
        latent_t = np.ascontiguousarray(c_kv.T)

        scores = []
        for head in range(cfg.n_h):
            nope = matmul(c_q[:, head * width:(head + 1) * width], latent_t)
            scores.append(self.rope_scores(weights, head, q_heads[head], k_rope) + nope)
        probs = self.causal_heads(weights, positions, scores, tap)

        latent_out = np.concatenate([matmul(p, c_kv) for p in probs], axis=1)
        return matmul(latent_out, tensors["Wo_absorbed"])
