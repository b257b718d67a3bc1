# mlaforge/attention/variant_registry.py
from typing import Dict, Optional

from ..utils.errors import UsageError, VariantMismatchError
from .absorbed_variant import AbsorbedAttention
from .base_variant import AttentionVariant
from .latent_variant import LatentAttention
from .rope_variant import RopeAttention
from .weights import AttentionWeights


class VariantRegistry:
    """
    Registry of the attention forward paths, keyed by the names the CLI accepts.
    """

    def __init__(self):
        self.variants: Dict[str, AttentionVariant] = {}
        self._initialize_variants()

    def _initialize_variants(self):
        """Register the four forward paths."""
        self.register_variant("full", RopeAttention("full", "Full-RoPE multi-head / grouped-query attention"))
        self.register_variant("partial", RopeAttention("partial", "Partial-RoPE attention over a subspace selection"))
        self.register_variant("mla", LatentAttention())
        self.register_variant("mla-absorbed", AbsorbedAttention())

    def register_variant(self, key: str, variant: AttentionVariant):
        self.variants[key] = variant

    def get_variant(self, key: str) -> Optional[AttentionVariant]:
        return self.variants.get(key)

    def get_all_variants(self) -> Dict[str, AttentionVariant]:
        return self.variants.copy()

    def resolve(self, key: str) -> AttentionVariant:
        variant = self.get_variant(key)
        if variant is None:
            raise UsageError(f"Unknown attention variant '{key}'. Valid variants: {list(self.variants)}")
        return variant

    def default_for(self, weights: AttentionWeights) -> AttentionVariant:
        """The natural forward path of a set of weights."""
        key = {"mha_full": "full", "mha_partial": "partial", "mla": "mla"}.get(weights.variant)
        if key is None:
            raise VariantMismatchError(f"No attention variant runs {weights.variant} weights")
        return self.variants[key]


registry = VariantRegistry()
