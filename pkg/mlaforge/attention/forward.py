# mlaforge/attention/forward.py
"""Public forward entry points: one per attention path, plus incremental decoding."""
import hashlib
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from ..rope import RopeSelection
from ..tensorio import ModelConfig
from ..utils.errors import ConfigError, UsageError, VariantMismatchError
from .base_variant import AttentionTap, ForwardResult
from .cache import KvCache
from .variant_registry import registry
from .weights import AttentionWeights

_ARCHITECTURE = ("d", "n_h", "n_g", "d_h", "n_layers", "vocab", "rope_base", "d_ff", "norm_eps")


def same_architecture(a: ModelConfig, b: ModelConfig) -> bool:
    return all(getattr(a, name) == getattr(b, name) for name in _ARCHITECTURE)


def _check_config(cfg: ModelConfig, weights: AttentionWeights) -> None:
    if not same_architecture(cfg, weights.cfg):
        raise ConfigError("Model config does not match the loaded weights")


def forward_full(cfg: ModelConfig, weights: AttentionWeights, tokens, tap: Optional[AttentionTap] = None) -> ForwardResult:
    _check_config(cfg, weights)
    full = weights.with_selection(RopeSelection.full(cfg.d_h, cfg.n_layers, cfg.n_g))
    return registry.resolve("full").forward(full, tokens, tap=tap)


def forward_partial(
    cfg: ModelConfig,
    weights: AttentionWeights,
    sel: RopeSelection,
    tokens,
    tap: Optional[AttentionTap] = None,
) -> ForwardResult:
    _check_config(cfg, weights)
    return registry.resolve("partial").forward(weights.with_selection(sel), tokens, tap=tap)


def forward_mla_naive(
    cfg: ModelConfig,
    weights: AttentionWeights,
    tokens,
    cache: Optional[KvCache] = None,
    tap: Optional[AttentionTap] = None,
) -> ForwardResult:
    _check_config(cfg, weights)
    return registry.resolve("mla").forward(weights, tokens, cache=cache, tap=tap)


def forward_mla_absorbed(
    cfg: ModelConfig,
    weights: AttentionWeights,
    tokens,
    cache: Optional[KvCache] = None,
    tap: Optional[AttentionTap] = None,
) -> ForwardResult:
    _check_config(cfg, weights)
    return registry.resolve("mla-absorbed").forward(weights, tokens, cache=cache, tap=tap)


def decode_step(
    cfg: ModelConfig,
    weights: AttentionWeights,
    cache: KvCache,
    token: int,
    variant: Optional[str] = None,
) -> Tuple[np.ndarray, KvCache]:
    """Append one token; returns its logits row and the (same, grown) cache."""
    _check_config(cfg, weights)
    path = registry.resolve(variant) if variant else registry.default_for(weights)
    result = path.forward(weights, [int(token)], cache=cache)
    return result.logits[-1], cache


def logits_digest(logits: np.ndarray) -> str:
    """Stable short hash of a logits row, for regression comparisons."""
    return hashlib.sha256(np.ascontiguousarray(logits, dtype="<f4").tobytes()).hexdigest()[:16]


class DecodeResult(BaseModel):
    tokens: List[int]
    generated: List[int]
    step_digests: List[str]


def greedy_decode(
    cfg: ModelConfig,
    weights: AttentionWeights,
    prompt: Sequence[int],
    steps: int,
    variant: Optional[str] = None,
    cache_kind: Optional[str] = None,
) -> DecodeResult:
    """Prefill the prompt token by token, then extend greedily by `steps` tokens."""
    if not prompt:
        raise UsageError("The prompt must hold at least one token")
    if steps < 0:
        raise UsageError("steps must be nonnegative")
    _check_config(cfg, weights)
    path = registry.resolve(variant) if variant else registry.default_for(weights)
    path.check_compatible(weights)
    cache = path.new_cache(weights, cache_kind)

    tokens = [int(t) for t in prompt]
    logits = None
    for token in tokens:
        logits, cache = decode_step(cfg, weights, cache, token, path.name)
    generated, digests = [], []
    for _ in range(steps):
        nxt = int(np.argmax(logits))
        digests.append(logits_digest(logits))
        generated.append(nxt)
        logits, cache = decode_step(cfg, weights, cache, nxt, path.name)
    return DecodeResult(tokens=tokens + generated, generated=generated, step_digests=digests)


def check_cache_variant(variant: str, cache_kind: str) -> None:
    path = registry.resolve(variant)
    if cache_kind not in path.cache_kinds:
        raise VariantMismatchError(f"Variant '{variant}' cannot use a {cache_kind} cache")
