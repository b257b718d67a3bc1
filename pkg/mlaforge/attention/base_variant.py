# mlaforge/attention/base_variant.py
from abc import ABC, abstractmethod
from typing import Callable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..linalg import matmul, softmax_rows
from ..utils.errors import CorpusError, VariantMismatchError
from .cache import KvCache, make_cache
from .weights import AttentionWeights

QkObserver = Callable[[int, np.ndarray, np.ndarray], None]


class ForwardResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    logits: np.ndarray
    attn_outputs: List[np.ndarray]
    scores: Optional[List[np.ndarray]] = None
    probs: Optional[List[np.ndarray]] = None


class AttentionTap:
    """
    Optional instrumentation for one forward pass: captures scaled, masked
    scores and softmax rows per layer (n_h x queries x keys), and hands
    pre-RoPE q/k projections to an observer.
    """

    def __init__(self, record_scores: bool = False, on_qk: Optional[QkObserver] = None):
        self.record_scores = record_scores
        self.on_qk = on_qk
        self.scores: List[np.ndarray] = []
        self.probs: List[np.ndarray] = []

    def capture(self, scores: List[np.ndarray], probs: List[np.ndarray]) -> None:
        if self.record_scores:
            self.scores.append(np.stack(scores))
            self.probs.append(np.stack(probs))

    def observe_qk(self, layer: int, q: np.ndarray, k: np.ndarray) -> None:
        if self.on_qk is not None:
            self.on_qk(layer, q, k)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    scale = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + x.dtype.type(eps))
    return x / scale * gain


def silu(z: np.ndarray) -> np.ndarray:
    return z * (z.dtype.type(0.5) * (1 + np.tanh(z * z.dtype.type(0.5))))


class AttentionVariant(ABC):
    """
    Base class for the interchangeable attention forward paths. Subclasses
    implement one layer's attention; the decoder stack around it is shared.
    """

    def __init__(self, name: str, description: str, weight_variants: Tuple[str, ...], cache_kinds: Tuple[str, ...]):
        self.name = name
        self.description = description
        self.weight_variants = weight_variants
        self.cache_kinds = cache_kinds

    @abstractmethod
    def attend(
        self,
        weights: AttentionWeights,
        layer: int,
        h: np.ndarray,
        positions: np.ndarray,
        cache: KvCache,
        tap: Optional[AttentionTap] = None,
    ) -> np.ndarray:
        """
        Project the normalized hidden rows h at `positions`, append their
        keys to the cache and attend causally over everything cached.
        """
        pass

    def check_compatible(self, weights: AttentionWeights, cache: Optional[KvCache] = None) -> None:
        if weights.variant not in self.weight_variants:
            raise VariantMismatchError(
                f"Variant '{self.name}' cannot run {weights.variant} weights (accepts {list(self.weight_variants)})"
            )
        if cache is not None:
            if cache.kind not in self.cache_kinds:
                raise VariantMismatchError(
                    f"Variant '{self.name}' cannot use a {cache.kind} cache (accepts {list(self.cache_kinds)})"
                )
            if cache.n_layers != weights.cfg.n_layers:
                raise VariantMismatchError(f"Cache has {cache.n_layers} layers, model has {weights.cfg.n_layers}")

    def new_cache(self, weights: AttentionWeights, kind: Optional[str] = None, **options) -> KvCache:
        return make_cache(kind or self.cache_kinds[0], weights.cfg.n_layers, **options)

    def causal_heads(
        self,
        weights: AttentionWeights,
        positions: np.ndarray,
        head_scores: List[np.ndarray],
        tap: Optional[AttentionTap],
    ) -> List[np.ndarray]:
        """Scale raw per-head scores by 1/sqrt(d_h), mask future keys, softmax."""
        scale = weights.dtype.type(1.0 / np.sqrt(weights.cfg.d_h))
        n_keys = head_scores[0].shape[1]
        future = np.arange(n_keys)[None, :] > np.asarray(positions)[:, None]
        masked = [np.where(future, -np.inf, s * scale).astype(weights.dtype) for s in head_scores]
        probs = [softmax_rows(s) for s in masked]
        if tap is not None:
            tap.capture(masked, probs)
        return probs

    def forward(
        self,
        weights: AttentionWeights,
        tokens,
        cache: Optional[KvCache] = None,
        tap: Optional[AttentionTap] = None,
    ) -> ForwardResult:
        """
        Run the decoder stack over `tokens`, which sit right after whatever the
        cache already holds. Without a cache a fresh one is used, so a batched
        forward is a prefill of an empty cache.
        """
        cache = cache if cache is not None else self.new_cache(weights)
        self.check_compatible(weights, cache)
        cfg = weights.cfg
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
            raise CorpusError(f"Token ids must lie in [0, {cfg.vocab})")
        positions = np.arange(cache.length, cache.length + ids.size)

        x = weights.embed[ids]
        outputs = []
        for layer, tensors in enumerate(weights.layers):
            h = rms_norm(x, tensors["norm1"], cfg.norm_eps)
            attn = self.attend(weights, layer, h, positions, cache, tap)
            outputs.append(attn)
            x = x + attn
            h = rms_norm(x, tensors["norm2"], cfg.norm_eps)
            x = x + matmul(silu(matmul(h, tensors["mlp.up"])), tensors["mlp.down"])

        return ForwardResult(
            logits=matmul(x, weights.lm_head),
            attn_outputs=outputs,
            scores=tap.scores if tap is not None and tap.record_scores else None,
            probs=tap.probs if tap is not None and tap.record_scores else None,
        )
