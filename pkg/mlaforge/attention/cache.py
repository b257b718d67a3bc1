# mlaforge/attention/cache.py
"""KV caches for incremental decoding. Appended rows are frozen."""
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..cachemodel import QuantizedRows, QuantSpec, dequantize_rows, quantize_rows
from ..utils.errors import ShapeError, UsageError

CACHE_KINDS = ("full", "latent", "quant4", "quant2")


class KvCache:
    """Per-layer row stores. Every layer holds one row per generated position."""

    kind: str = ""
    fields: Tuple[str, ...] = ()

    def __init__(self, n_layers: int):
        self.n_layers = n_layers
        self._rows: List[Dict[str, Optional[np.ndarray]]] = [
            {name: None for name in self.fields} for _ in range(n_layers)
        ]

    def _store(self, layer: int, name: str, rows: np.ndarray) -> np.ndarray:
        rows = np.array(rows, copy=True)
        held = self._rows[layer][name]
        if held is not None:
            if held.shape[1] != rows.shape[1] or held.dtype != rows.dtype:
                raise ShapeError(
                    f"{self.kind} cache layer {layer} '{name}': cannot append {rows.dtype} rows of width "
                    f"{rows.shape[1]} to {held.dtype} rows of width {held.shape[1]}"
                )
            rows = np.concatenate([held, rows], axis=0)
        rows.setflags(write=False)
        self._rows[layer][name] = rows
        return rows

    def _read(self, layer: int, name: str) -> np.ndarray:
        rows = self._rows[layer][name]
        if rows is None:
            raise UsageError(f"{self.kind} cache layer {layer} has no '{name}' rows yet")
        return rows

    def layer_length(self, layer: int) -> int:
        rows = self._rows[layer][self.fields[0]]
        return 0 if rows is None else int(rows.shape[0])

    @property
    def length(self) -> int:
        return self.layer_length(0) if self.n_layers else 0

    def __len__(self) -> int:
        return self.length


class FullCache(KvCache):
    """Post-RoPE keys and values, row layout n_g·d_h with kv head g at columns g·d_h."""

    kind = "full"
    fields = ("k", "v")

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        if k.shape[0] != v.shape[0]:
            raise ShapeError("key and value row counts differ")
        self._store(layer, "k", k)
        self._store(layer, "v", v)

    def keys(self, layer: int) -> np.ndarray:
        return self._read(layer, "k")

    def values(self, layer: int) -> np.ndarray:
        return self._read(layer, "v")


class LatentCache(KvCache):
    """Post-RoPE k_rope rows (n_g·2r) and latent c_kv rows (D_kv)."""

    kind = "latent"
    fields = ("k_rope", "c_kv")

    def append(self, layer: int, k_rope: np.ndarray, c_kv: np.ndarray) -> None:
        if k_rope.shape[0] != c_kv.shape[0]:
            raise ShapeError("k_rope and c_kv row counts differ")
        self._store(layer, "k_rope", k_rope)
        self._store(layer, "c_kv", c_kv)

    def k_rope(self, layer: int) -> np.ndarray:
        return self._read(layer, "k_rope")

    def c_kv(self, layer: int) -> np.ndarray:
        return self._read(layer, "c_kv")


class QuantizedLatentCache(LatentCache):
    """
    Latent cache whose c_kv rows (and k_rope rows when quantize_rope is set)
    are kept as group-affine codes. Reads return the dequantized rows.
    """

    def __init__(self, n_layers: int, spec: QuantSpec, quantize_rope: bool = False):
        super().__init__(n_layers)
        self.spec = spec
        self.quantize_rope = quantize_rope
        self.kind = f"quant{spec.bits}"
        self.coded: List[Dict[str, List[QuantizedRows]]] = [
            {name: [] for name in self.fields} for _ in range(n_layers)
        ]

    def _roundtrip(self, layer: int, name: str, rows: np.ndarray) -> np.ndarray:
        coded = quantize_rows(rows, self.spec)
        self.coded[layer][name].append(coded)
        return dequantize_rows(coded, dtype=rows.dtype)

    def append(self, layer: int, k_rope: np.ndarray, c_kv: np.ndarray) -> None:
        if self.quantize_rope and k_rope.shape[1] > 0:
            k_rope = self._roundtrip(layer, "k_rope", k_rope)
        super().append(layer, k_rope, self._roundtrip(layer, "c_kv", c_kv))

    def codes(self, layer: int, name: str = "c_kv") -> np.ndarray:
        blocks = self.coded[layer][name]
        if not blocks:
            raise UsageError(f"{self.kind} cache layer {layer} holds no coded '{name}' rows")
        return np.concatenate([block.codes for block in blocks], axis=0)


def make_cache(kind: str, n_layers: int, group_size: int = 32, quantize_rope: bool = False) -> KvCache:
    if kind == "full":
        return FullCache(n_layers)
    if kind == "latent":
        return LatentCache(n_layers)
    if kind in ("quant4", "quant2"):
        spec = QuantSpec(bits=int(kind[len("quant"):]), group_size=group_size)
        return QuantizedLatentCache(n_layers, spec, quantize_rope=quantize_rope)
    raise UsageError(f"Unknown cache kind '{kind}'. Valid kinds: {list(CACHE_KINDS)}")
