# mlaforge/convert.py
"""
MHA/GQA -> latent-attention conversion: select RoPE subspaces, factorize the
NoPE keys and values, precompute the absorbed products and assemble the
converted checkpoint together with its error ledger.
"""
import hashlib
import time
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .attention.weights import absorb_output, absorb_query
from .calib import NormStats
from .lowrank import LatentFactors, factor_model
from .rope import RopeSelection, registry as strategy_registry, split_projection
from .tensorio import ModelConfig, TensorStore, layer_key
from .utils.errors import UsageError, VariantMismatchError
from .utils.logger import StageLogger, get_logger

logger = get_logger("mlaforge.convert")

_PASSTHROUGH = ("Wo", "norm2", "mlp.up", "mlp.down")


def weights_digest(store: TensorStore) -> str:
    """Hash over tensor names, dtypes, shapes and bytes, in store order."""
    digest = hashlib.sha256()
    for name, array in store.items():
        digest.update(f"{name}|{array.dtype.str}|{array.shape}".encode("utf-8"))
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def select_rope(cfg: ModelConfig, stats: Optional[NormStats] = None) -> RopeSelection:
    strategy = strategy_registry.resolve(cfg.strategy)
    strategy.check_rank(cfg.r, cfg.d_h)
    if strategy.requires_stats:
        if stats is None:
            raise UsageError(f"Strategy '{cfg.strategy}' needs 2-norm statistics (pass --stats)")
        stats.check_against(cfg)
    return strategy.select(cfg, stats=stats)


def _ledger(factors: List[LatentFactors]) -> List[Dict[str, Any]]:
    return [
        {
            "layer": f.layer,
            "mode": f.mode,
            "per_head": f.per_head,
            "rank": f.rank,
            "discarded_sq_sum": f.discarded_sq_sum,
            "discarded": f.discarded,
            "total_sq_norm": f.total_sq_norm,
            "sweeps": f.sweeps,
        }
        for f in factors
    ]


def assemble_mla(
    cfg: ModelConfig,
    store: TensorStore,
    selection: RopeSelection,
    factors: List[LatentFactors],
    dtype=np.float32,
) -> TensorStore:
    """Converted store in manifest order; factors and absorbed products are cast once, here."""
    converted = TensorStore("mla")
    converted.put("embed", store.get("embed"))
    for layer, layer_factors in enumerate(factors):
        key = lambda suffix: layer_key(layer, suffix)  # noqa: E731
        wq = np.asarray(store.layer(layer, "Wq"), dtype=np.float64)
        wk = np.asarray(store.layer(layer, "Wk"), dtype=np.float64)
        wo = np.asarray(store.layer(layer, "Wo"), dtype=np.float64)
        wq_rope, wq_nope = split_projection(wq, selection, layer, "q")
        wk_rope, _ = split_projection(wk, selection, layer, "k")

        converted.put(key("norm1"), store.layer(layer, "norm1"))
        converted.put(key("Wq_rope"), wq_rope.astype(dtype))
        converted.put(key("Wq_nope"), wq_nope.astype(dtype))
        converted.put(key("Wk_rope"), wk_rope.astype(dtype))
        converted.put(key("Wdkv"), layer_factors.w_dkv.astype(dtype))
        converted.put(key("Wuk"), layer_factors.w_uk.astype(dtype))
        converted.put(key("Wuv"), layer_factors.w_uv.astype(dtype))
        converted.put(key("Wq_absorbed"), absorb_query(cfg, wq_nope, layer_factors.w_uk).astype(dtype))
        converted.put(key("Wo_absorbed"), absorb_output(cfg, layer_factors.w_uv, wo).astype(dtype))
        converted.put(key("S"), selection.to_tensor(layer))
        for name in _PASSTHROUGH:
            converted.put(key(name), store.layer(layer, name))
    converted.put("lm_head", store.get("lm_head"))
    return converted


def convert_checkpoint(
    cfg: ModelConfig,
    store: TensorStore,
    stats: Optional[NormStats] = None,
    **overrides: Any,
) -> Tuple[ModelConfig, TensorStore, List[LatentFactors]]:
    """
    Convert a full checkpoint. `overrides` (strategy, r, d_kv_per_head,
    svd_mode, per_head_svd, global_selection) replace the config's conversion
    block; the converted config is returned alongside the store.
    """
    if store.variant != "full":
        raise VariantMismatchError("Only unconverted (full) checkpoints can be converted")
    target = cfg.with_conversion(**overrides)

    stage = StageLogger("conversion")
    started = time.time()
    stage.log_stage_start({
        "strategy": target.strategy,
        "r": target.r,
        "d_kv_per_head": target.d_kv_per_head,
        "svd_mode": target.svd_mode,
        "per_head_svd": target.per_head_svd,
    })

    try:
        selection = select_rope(target, stats)
        for layer in range(target.n_layers):
            stage.log_selection(layer, selection.sets[layer], selection.strategy)
        factors = factor_model(target, store, selection)
    except Exception as exc:
        stage.log_error(exc, "selection / factorization")
        raise
    for f in factors:
        stage.log_factorization(f.layer, f.mode, f.rank, f.discarded_sq_sum)

    converted = assemble_mla(target, store, selection, factors)
    converted.meta = {
        "source_config_digest": cfg.digest(),
        "source_weights_digest": weights_digest(store),
        "stats_config_digest": stats.config_digest if stats is not None else None,
        "stats_corpus_digest": stats.corpus_digest if stats is not None else None,
        "selection": selection.model_dump(),
        "full_rank": all(f.is_exact for f in factors),
        "ledger": _ledger(factors),
    }
    stage.log_stage_complete((time.time() - started) * 1000)
    return target, converted, factors
