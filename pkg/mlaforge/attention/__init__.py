# mlaforge/attention/__init__.py
from .weights import AttentionWeights, absorb_output, absorb_query
from .cache import CACHE_KINDS, FullCache, KvCache, LatentCache, QuantizedLatentCache, make_cache
from .base_variant import AttentionTap, AttentionVariant, ForwardResult
from .variant_registry import VariantRegistry, registry
from .forward import (
    DecodeResult,
    check_cache_variant,
    decode_step,
    forward_full,
    forward_mla_absorbed,
    forward_mla_naive,
    forward_partial,
    greedy_decode,
    logits_digest,
    same_architecture,
)

__all__ = [
    "AttentionWeights", "absorb_output", "absorb_query",
    "CACHE_KINDS", "FullCache", "KvCache", "LatentCache", "QuantizedLatentCache", "make_cache",
    "AttentionTap", "AttentionVariant", "ForwardResult",
    "VariantRegistry", "registry",
    "DecodeResult", "check_cache_variant", "decode_step", "forward_full", "forward_mla_absorbed",
    "forward_mla_naive", "forward_partial", "greedy_decode", "logits_digest", "same_architecture",
]
