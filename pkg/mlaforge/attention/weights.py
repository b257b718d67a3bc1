# mlaforge/attention/weights.py
"""
Forward-ready view of a checkpoint: per-layer tensors cast to the forward
dtype, the RoPE selection in force, and for converted checkpoints the stored
absorbed products.
"""
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..linalg import matmul, max_abs
from ..rope import FreqSpectrum, RopeSelection
from ..tensorio import ModelConfig, TensorStore
from ..utils.errors import ShapeError, VariantMismatchError

_LAYER_TENSORS = {
    "full": ("norm1", "Wq", "Wk", "Wv", "Wo", "norm2", "mlp.up", "mlp.down"),
    "mla": (
        "norm1", "Wq_rope", "Wq_nope", "Wk_rope", "Wdkv", "Wuk", "Wuv",
        "Wq_absorbed", "Wo_absorbed", "Wo", "norm2", "mlp.up", "mlp.down",
    ),
}


def absorb_query(cfg: ModelConfig, wq_nope: np.ndarray, wuk: np.ndarray) -> np.ndarray:
    """
    Per query head h in kv group g: Wq_nope^(h) · Wuk^(g)ᵀ, a d x D_kv block.
    Blocks are laid side by side in head order (d x n_h·D_kv).
    """
    d_c = cfg.d_nope
    blocks = []
    for head in range(cfg.n_h):
        group = cfg.group_of(head)
        q_block = np.asarray(wq_nope[:, head * d_c:(head + 1) * d_c], dtype=np.float64)
        k_block = np.asarray(wuk[:, group * d_c:(group + 1) * d_c], dtype=np.float64)
        blocks.append(matmul(q_block, np.ascontiguousarray(k_block.T)))
    return np.concatenate(blocks, axis=1)


def absorb_output(cfg: ModelConfig, wuv: np.ndarray, wo: np.ndarray) -> np.ndarray:
    """Per query head: Wuv^(g) · Wo^(h), a D_kv x d block; blocks stacked in head order."""
    d_h = cfg.d_h
    blocks = []
    for head in range(cfg.n_h):
        group = cfg.group_of(head)
        v_block = np.asarray(wuv[:, group * d_h:(group + 1) * d_h], dtype=np.float64)
        o_block = np.asarray(wo[head * d_h:(head + 1) * d_h, :], dtype=np.float64)
        blocks.append(matmul(v_block, o_block))
    return np.concatenate(blocks, axis=0)


class AttentionWeights(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    cfg: ModelConfig
    variant: str
    selection: RopeSelection
    dtype: np.dtype
    embed: np.ndarray
    lm_head: np.ndarray
    layers: List[Dict[str, np.ndarray]]

    @classmethod
    def from_store(
        cls,
        cfg: ModelConfig,
        store: TensorStore,
        selection: Optional[RopeSelection] = None,
        dtype=np.float32,
    ) -> "AttentionWeights":
        dtype = np.dtype(dtype)
        if store.variant not in _LAYER_TENSORS:
            raise VariantMismatchError(f"Unknown checkpoint variant '{store.variant}'")
        layers = []
        for layer in range(cfg.n_layers):
            layers.append({
                name: np.ascontiguousarray(store.layer(layer, name), dtype=dtype)
                for name in _LAYER_TENSORS[store.variant]
            })

        if store.variant == "mla":
            stored = RopeSelection.from_tensors(
                cfg.strategy, cfg.d_h, [store.layer(layer, "S") for layer in range(cfg.n_layers)]
            )
            if selection is not None and selection.sets != stored.sets:
                raise VariantMismatchError("A converted checkpoint carries its own RoPE selection")
            selection, variant = stored, "mla"
        elif selection is None:
            selection, variant = RopeSelection.full(cfg.d_h, cfg.n_layers, cfg.n_g), "mha_full"
        else:
            variant = "mha_partial"

        weights = cls(
            cfg=cfg,
            variant=variant,
            selection=selection,
            dtype=dtype,
            embed=np.ascontiguousarray(store.get("embed"), dtype=dtype),
            lm_head=np.ascontiguousarray(store.get("lm_head"), dtype=dtype),
            layers=layers,
        )
        weights._check_selection(selection)
        return weights

    def _check_selection(self, selection: RopeSelection) -> None:
        if (selection.n_layers, selection.n_groups, selection.d_h) != (self.cfg.n_layers, self.cfg.n_g, self.cfg.d_h):
            raise ShapeError(
                f"Selection covers {selection.n_layers} layers x {selection.n_groups} groups (d_h={selection.d_h}), "
                f"model has {self.cfg.n_layers} x {self.cfg.n_g} (d_h={self.cfg.d_h})"
            )
        if self.variant == "mla" and selection.r != self.cfg.r:
            raise ShapeError(f"Selection keeps r={selection.r} subspaces, converted model expects r={self.cfg.r}")

    @property
    def is_mla(self) -> bool:
        return self.variant == "mla"

    @property
    def spectrum(self) -> FreqSpectrum:
        return FreqSpectrum(d_h=self.cfg.d_h, base=self.cfg.rope_base)

    def with_selection(self, selection: RopeSelection) -> "AttentionWeights":
        """Same source weights under a different partial-RoPE selection."""
        if self.is_mla:
            raise VariantMismatchError("Partial-RoPE selection applies to unconverted checkpoints only")
        self._check_selection(selection)
        full = selection.sets == RopeSelection.full(self.cfg.d_h, self.cfg.n_layers, self.cfg.n_g).sets
        return self.model_copy(update={"selection": selection, "variant": "mha_full" if full else "mha_partial"})

    def absorbed_drift(self) -> List[float]:
        """Per layer, max-abs gap between stored absorbed products and those recomputed from the factors."""
        if not self.is_mla:
            raise VariantMismatchError("Absorbed products exist only in converted checkpoints")
        drift = []
        for tensors in self.layers:
            query = absorb_query(self.cfg, tensors["Wq_nope"], tensors["Wuk"])
            output = absorb_output(self.cfg, tensors["Wuv"], tensors["Wo"])
            drift.append(max(
                max_abs(query - tensors["Wq_absorbed"].astype(np.float64)),
                max_abs(output - tensors["Wo_absorbed"].astype(np.float64)),
            ))
        return drift
