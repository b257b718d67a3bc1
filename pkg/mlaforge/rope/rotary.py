# mlaforge/rope/rotary.py
"""
Rotary position embedding in the chunked layout: frequency subspace k owns
the adjacent dimensions (2k, 2k+1) of a head and rotates at theta_k.
"""
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, model_validator

from ..utils.errors import ShapeError


class FreqSpectrum(BaseModel):
    d_h: int
    base: float = 1e4

    @property
    def thetas(self) -> np.ndarray:
        k = np.arange(self.d_h // 2, dtype=np.float64)
        return self.base ** (-2.0 * k / self.d_h)


class RopeSelection(BaseModel):
    """
    Retained subspaces per layer and kv group: sets[layer][group] is the
    sorted list S. Query heads use the set of their kv group.
    """

    strategy: str
    d_h: int
    sets: List[List[List[int]]]

    @model_validator(mode="after")
    def _check_sets(self) -> "RopeSelection":
        n_sub = self.d_h // 2
        sizes = set()
        for layer_sets in self.sets:
            for subspaces in layer_sets:
                if list(subspaces) != sorted(set(subspaces)):
                    raise ValueError(f"subspace set {subspaces} must be sorted and unique")
                if subspaces and (subspaces[0] < 0 or subspaces[-1] >= n_sub):
                    raise ValueError(f"subspace set {subspaces} outside [0, {n_sub})")
                sizes.add(len(subspaces))
        if len(sizes) > 1:
            raise ValueError(f"all retained sets must have the same size, got sizes {sorted(sizes)}")
        return self

    @classmethod
    def replicated(cls, strategy: str, subspaces: Sequence[int], d_h: int, n_layers: int, n_g: int) -> "RopeSelection":
        chosen = sorted(int(k) for k in subspaces)
        return cls(
            strategy=strategy,
            d_h=d_h,
            sets=[[list(chosen) for _ in range(n_g)] for _ in range(n_layers)],
        )

    @classmethod
    def full(cls, d_h: int, n_layers: int, n_g: int) -> "RopeSelection":
        return cls.replicated("full", range(d_h // 2), d_h, n_layers, n_g)

    @classmethod
    def from_tensors(cls, strategy: str, d_h: int, tensors: Iterable[np.ndarray]) -> "RopeSelection":
        """Rebuild from per-layer (n_g x r) index tensors as stored in checkpoints."""
        return cls(
            strategy=strategy,
            d_h=d_h,
            sets=[[sorted(int(k) for k in row) for row in np.asarray(t)] for t in tensors],
        )

    @property
    def n_layers(self) -> int:
        return len(self.sets)

    @property
    def n_groups(self) -> int:
        return len(self.sets[0]) if self.sets else 0

    @property
    def r(self) -> int:
        return len(self.sets[0][0]) if self.sets and self.sets[0] else 0

    def subspaces(self, layer: int, group: int) -> List[int]:
        return self.sets[layer][group]

    def rope_dims(self, layer: int, group: int) -> np.ndarray:
        chosen = np.array(self.sets[layer][group], dtype=np.intp)
        return np.stack([2 * chosen, 2 * chosen + 1], axis=1).reshape(-1)

    def nope_dims(self, layer: int, group: int) -> np.ndarray:
        mask = np.ones(self.d_h, dtype=bool)
        mask[self.rope_dims(layer, group)] = False
        return np.flatnonzero(mask)

    def to_tensor(self, layer: int) -> np.ndarray:
        return np.array(self.sets[layer], dtype=np.uint32).reshape(self.n_groups, self.r)

    def is_uniform(self) -> bool:
        first = self.sets[0][0] if self.sets and self.sets[0] else []
        return all(s == first for layer_sets in self.sets for s in layer_sets)


def rotate_pairs(x: np.ndarray, positions: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """
    Rotate consecutive coordinate pairs of x (rows x 2m) by position * theta.
    Row i uses positions[i]; pair j uses thetas[j].
    """
    if x.shape[-1] != 2 * len(thetas):
        raise ShapeError(f"rotate_pairs: width {x.shape[-1]} does not match {len(thetas)} subspaces")
    if len(thetas) == 0:
        return x.copy()
    angles = np.asarray(positions, dtype=np.float64)[:, None] * np.asarray(thetas, dtype=np.float64)[None, :]
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    even = x[:, 0::2]
    odd = x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def apply_rope(x: np.ndarray, positions: np.ndarray, spectrum: FreqSpectrum, subspaces: Sequence[int]) -> np.ndarray:
    """
    Rotate chunk [2k, 2k+1] of every row by positions[row] * theta_k for k in
    `subspaces`; the other chunks pass through unchanged (NoPE).
    """
    x = np.asarray(x)
    if x.shape[-1] != spectrum.d_h:
        raise ShapeError(f"apply_rope: vector width {x.shape[-1]} != d_h {spectrum.d_h}")
    chosen = np.array(sorted(subspaces), dtype=np.intp)
    out = x.copy()
    if chosen.size == 0:
        return out
    if chosen[0] < 0 or chosen[-1] >= spectrum.d_h // 2:
        raise ShapeError(f"apply_rope: subspaces {list(chosen)} outside [0, {spectrum.d_h // 2})")
    dims = np.stack([2 * chosen, 2 * chosen + 1], axis=1).reshape(-1)
    out[:, dims] = rotate_pairs(x[:, dims], positions, spectrum.thetas[chosen])
    return out


def _heads_and_groups(width: int, sel: RopeSelection, role: str) -> Tuple[int, List[int]]:
    if width % sel.d_h != 0:
        raise ShapeError(f"projection width {width} is not a multiple of d_h={sel.d_h}")
    n = width // sel.d_h
    n_g = sel.n_groups
    if role == "k":
        if n != n_g:
            raise ShapeError(f"key projection has {n} heads but the selection has {n_g} kv groups")
        return n, list(range(n))
    if role == "q":
        if n % n_g != 0:
            raise ShapeError(f"{n} query heads cannot be grouped into {n_g} kv groups")
        return n, [h * n_g // n for h in range(n)]
    raise ShapeError(f"unknown projection role '{role}'")


def split_projection(w: np.ndarray, sel: RopeSelection, layer: int, role: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split a d x (n*d_h) projection into (W_rope, W_nope). Per head, rope
    columns come first in W_rope and the rest land in W_nope, both in
    ascending column order.
    """
    n, groups = _heads_and_groups(w.shape[1], sel, role)
    rope_cols, nope_cols = [], []
    for head in range(n):
        base = head * sel.d_h
        rope_cols.append(base + sel.rope_dims(layer, groups[head]))
        nope_cols.append(base + sel.nope_dims(layer, groups[head]))
    rope_idx = np.concatenate(rope_cols) if rope_cols else np.zeros(0, dtype=np.intp)
    nope_idx = np.concatenate(nope_cols) if nope_cols else np.zeros(0, dtype=np.intp)
    return w[:, rope_idx].copy(), w[:, nope_idx].copy()


def merge_projection(w_rope: np.ndarray, w_nope: np.ndarray, sel: RopeSelection, layer: int, role: str) -> np.ndarray:
    """Inverse of split_projection."""
    n, groups = _heads_and_groups(w_rope.shape[1] + w_nope.shape[1], sel, role)
    out = np.empty((w_rope.shape[0], n * sel.d_h), dtype=np.result_type(w_rope.dtype, w_nope.dtype))
    d_r = 2 * sel.r
    d_c = sel.d_h - d_r
    for head in range(n):
        base = head * sel.d_h
        out[:, base + sel.rope_dims(layer, groups[head])] = w_rope[:, head * d_r:(head + 1) * d_r]
        out[:, base + sel.nope_dims(layer, groups[head])] = w_nope[:, head * d_c:(head + 1) * d_c]
    return out
