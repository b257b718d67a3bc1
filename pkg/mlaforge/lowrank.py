# mlaforge/lowrank.py
"""
Low-rank factorization of the NoPE key projection and the value projection
into a shared latent: x·Wdkv is cached, Wuk / Wuv expand it back.

Every mode is packaged into the same (Wdkv, Wuk, Wuv) layout so attention
code never needs to know which mode produced the factors.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .linalg import SvdResult, frobenius_sq, max_abs, thin_svd
from .rope import RopeSelection, split_projection
from .tensorio import ModelConfig, TensorStore
from .utils.errors import ConfigError, RankError, ShapeError
from .utils.settings import get_thread_count

FULL_RANK_RELATIVE = 1e-12


class LatentFactors(BaseModel):
    """One layer's factors. Shapes: Wdkv d x D, Wuk D x n_g·d_c, Wuv D x n_g·d_h."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    layer: int = 0
    mode: Literal["split", "joint"]
    per_head: bool = False
    w_dkv: np.ndarray
    w_uk: np.ndarray
    w_uv: np.ndarray
    discarded: Dict[str, float]
    total_sq_norm: float
    sweeps: int = 0

    @property
    def rank(self) -> int:
        return int(self.w_dkv.shape[1])

    @property
    def discarded_sq_sum(self) -> float:
        return float(sum(self.discarded.values()))

    @property
    def is_exact(self) -> bool:
        return self.discarded_sq_sum <= FULL_RANK_RELATIVE * max(self.total_sq_norm, 1e-300)

    @property
    def w_dk(self) -> np.ndarray:
        """Key half of the latent (split mode only)."""
        self._require_split()
        return self.w_dkv[:, : self.rank // 2]

    @property
    def w_dv(self) -> np.ndarray:
        self._require_split()
        return self.w_dkv[:, self.rank // 2:]

    def _require_split(self) -> None:
        if self.mode != "split" or self.per_head:
            raise ShapeError("w_dk / w_dv exist only for merged split factors")

    def reconstruct(self) -> Tuple[np.ndarray, np.ndarray]:
        """(Wdkv·Wuk, Wdkv·Wuv), the rank-limited key-nope and value projections."""
        return self.w_dkv @ self.w_uk, self.w_dkv @ self.w_uv


def _balanced(svd: SvdResult) -> Tuple[np.ndarray, np.ndarray]:
    root = np.sqrt(svd.sigma)
    return svd.u * root, root[:, None] * svd.vt


def factor_joint(w_k_nope: np.ndarray, w_v: np.ndarray, d_kv: int, layer: int = 0) -> LatentFactors:
    """One truncated SVD of [Wk_nope, Wv] at rank d_kv, square-root balanced."""
    w_k_nope = np.asarray(w_k_nope, dtype=np.float64)
    w_v = np.asarray(w_v, dtype=np.float64)
    if w_k_nope.shape[0] != w_v.shape[0]:
        raise ShapeError(f"key ({w_k_nope.shape}) and value ({w_v.shape}) projections disagree on d")
    concat = np.concatenate([w_k_nope, w_v], axis=1)
    limit = min(concat.shape)
    if not 1 <= d_kv <= limit:
        raise RankError(f"joint latent width {d_kv} outside [1, {limit}]")
    svd = thin_svd(concat, d_kv)
    down, up = _balanced(svd)
    n_k = w_k_nope.shape[1]
    return LatentFactors(
        layer=layer,
        mode="joint",
        w_dkv=down,
        w_uk=up[:, :n_k],
        w_uv=up[:, n_k:],
        discarded={"kv": svd.discarded_sq_sum},
        total_sq_norm=frobenius_sq(concat),
        sweeps=svd.sweeps,
    )


def factor_split(w_k_nope: np.ndarray, w_v: np.ndarray, d_kv: int, layer: int = 0) -> LatentFactors:
    """
    Separate rank-d_kv/2 SVDs of Wk_nope and Wv. The latent is [x·Wdk, x·Wdv];
    Wuk reads only the first half of it and Wuv only the second.
    """
    w_k_nope = np.asarray(w_k_nope, dtype=np.float64)
    w_v = np.asarray(w_v, dtype=np.float64)
    if w_k_nope.shape[0] != w_v.shape[0]:
        raise ShapeError(f"key ({w_k_nope.shape}) and value ({w_v.shape}) projections disagree on d")
    if d_kv < 2 or d_kv % 2:
        raise RankError(f"split latent width {d_kv} must be even and at least 2")
    half = d_kv // 2
    limit = min(min(w_k_nope.shape), min(w_v.shape))
    if half > limit:
        raise RankError(f"split half-width {half} exceeds the smaller factor rank bound {limit}")
    svd_k = thin_svd(w_k_nope, half)
    svd_v = thin_svd(w_v, half)
    dk, uk = _balanced(svd_k)
    dv, uv = _balanced(svd_v)
    return LatentFactors(
        layer=layer,
        mode="split",
        w_dkv=np.concatenate([dk, dv], axis=1),
        w_uk=np.concatenate([uk, np.zeros((half, uk.shape[1]))], axis=0),
        w_uv=np.concatenate([np.zeros((half, uv.shape[1])), uv], axis=0),
        discarded={"k": svd_k.discarded_sq_sum, "v": svd_v.discarded_sq_sum},
        total_sq_norm=frobenius_sq(w_k_nope) + frobenius_sq(w_v),
        sweeps=max(svd_k.sweeps, svd_v.sweeps),
    )


_FACTORIZERS = {"joint": factor_joint, "split": factor_split}


def factor_per_head(
    w_k_nope: np.ndarray,
    w_v: np.ndarray,
    n_g: int,
    d_kv_per_head: int,
    mode: str = "joint",
    layer: int = 0,
) -> LatentFactors:
    """One factorization per kv head, packed block-diagonally."""
    w_k_nope = np.asarray(w_k_nope, dtype=np.float64)
    w_v = np.asarray(w_v, dtype=np.float64)
    if w_k_nope.shape[1] % n_g or w_v.shape[1] % n_g:
        raise ShapeError(f"projection widths {w_k_nope.shape[1]}, {w_v.shape[1]} do not split into {n_g} kv heads")
    d_c, d_h = w_k_nope.shape[1] // n_g, w_v.shape[1] // n_g
    width = n_g * d_kv_per_head
    w_dkv = np.zeros((w_v.shape[0], width))
    w_uk = np.zeros((width, n_g * d_c))
    w_uv = np.zeros((width, n_g * d_h))
    discarded: Dict[str, float] = {}
    sweeps = 0
    for g in range(n_g):
        head = _FACTORIZERS[mode](w_k_nope[:, g * d_c:(g + 1) * d_c], w_v[:, g * d_h:(g + 1) * d_h], d_kv_per_head, layer)
        rows = slice(g * d_kv_per_head, (g + 1) * d_kv_per_head)
        w_dkv[:, rows] = head.w_dkv
        w_uk[rows, g * d_c:(g + 1) * d_c] = head.w_uk
        w_uv[rows, g * d_h:(g + 1) * d_h] = head.w_uv
        discarded[f"head{g}"] = head.discarded_sq_sum
        sweeps = max(sweeps, head.sweeps)
    return LatentFactors(
        layer=layer,
        mode=mode,
        per_head=True,
        w_dkv=w_dkv,
        w_uk=w_uk,
        w_uv=w_uv,
        discarded=discarded,
        total_sq_norm=frobenius_sq(w_k_nope) + frobenius_sq(w_v),
        sweeps=sweeps,
    )


def layer_projections(store: TensorStore, selection: RopeSelection, layer: int) -> Tuple[np.ndarray, np.ndarray]:
    """(Wk_nope, Wv) of one source layer in float64."""
    _, w_k_nope = split_projection(np.asarray(store.layer(layer, "Wk"), dtype=np.float64), selection, layer, "k")
    return w_k_nope, np.asarray(store.layer(layer, "Wv"), dtype=np.float64)


def factor_layer(cfg: ModelConfig, w_k_nope: np.ndarray, w_v: np.ndarray, layer: int = 0) -> LatentFactors:
    if cfg.per_head_svd:
        return factor_per_head(w_k_nope, w_v, cfg.n_g, cfg.d_kv_per_head, cfg.svd_mode, layer)
    return _FACTORIZERS[cfg.svd_mode](w_k_nope, w_v, cfg.latent_width, layer)


def factor_model(cfg: ModelConfig, store: TensorStore, selection: RopeSelection) -> List[LatentFactors]:
    """Factorize every layer; layers run on the MLAFORGE_THREADS pool, results in layer order."""
    def run(layer: int) -> LatentFactors:
        w_k_nope, w_v = layer_projections(store, selection, layer)
        return factor_layer(cfg, w_k_nope, w_v, layer)

    with ThreadPoolExecutor(max_workers=get_thread_count()) as pool:
        return list(pool.map(run, range(cfg.n_layers)))


def full_rank_dkv(cfg: ModelConfig, mode: Optional[str] = None, per_head: Optional[bool] = None) -> int:
    """
    Per-head latent width at which factorization of a generic layer is exact.
    Raises ConfigError when that width is not expressible for the geometry.
    """
    mode = mode or cfg.svd_mode
    per_head = cfg.per_head_svd if per_head is None else per_head
    heads = 1 if per_head else cfg.n_g
    k_cols, v_cols = heads * cfg.d_nope, heads * cfg.d_h
    if mode == "joint":
        total = min(cfg.d, k_cols + v_cols)
    else:
        k_rank, v_rank = min(cfg.d, k_cols), min(cfg.d, v_cols)
        if k_rank != v_rank:
            raise ConfigError(
                f"split factorization cannot be exact: key rank bound {k_rank} differs from value rank bound {v_rank}"
            )
        total = 2 * k_rank
    if per_head:
        per = total
    elif total % cfg.n_g:
        raise ConfigError(f"full latent width {total} is not a multiple of n_g={cfg.n_g}")
    else:
        per = total // cfg.n_g
    # only validates: raises ConfigError when `per` breaks the config bounds
    # (d_kv_per_head <= 2(d_h - 2r), even for split)
    cfg.with_conversion(d_kv_per_head=per, svd_mode=mode)
    return per


class LayerError(BaseModel):
    layer: int
    mode: str
    rank: int
    key_sq_error: float
    value_sq_error: float
    total_sq_error: float
    discarded_sq_sum: float
    relative_error: float
    max_abs_error: float
    alternative_sq_error: Optional[float] = None


def reconstruction_report(
    factors: List[LatentFactors],
    originals: List[Tuple[np.ndarray, np.ndarray]],
    alternative: Optional[List[LatentFactors]] = None,
) -> List[LayerError]:
    """
    Frobenius and max-entry reconstruction errors per layer. With
    `alternative` (factors from the other mode), its total error is listed too.
    """
    if len(factors) != len(originals) or (alternative is not None and len(alternative) != len(factors)):
        raise ShapeError("factor and original lists must cover the same layers")
    rows = []
    for index, (layer_factors, (w_k_nope, w_v)) in enumerate(zip(factors, originals)):
        k_hat, v_hat = layer_factors.reconstruct()
        if k_hat.shape != np.shape(w_k_nope) or v_hat.shape != np.shape(w_v):
            raise ShapeError(f"layer {layer_factors.layer}: factor shapes do not match the original projections")
        k_err = frobenius_sq(w_k_nope - k_hat)
        v_err = frobenius_sq(w_v - v_hat)
        total = frobenius_sq(w_k_nope) + frobenius_sq(w_v)
        other = None
        if alternative is not None:
            alt_k, alt_v = alternative[index].reconstruct()
            other = frobenius_sq(w_k_nope - alt_k) + frobenius_sq(w_v - alt_v)
        rows.append(LayerError(
            layer=layer_factors.layer,
            mode=("per-head " if layer_factors.per_head else "") + layer_factors.mode,
            rank=layer_factors.rank,
            key_sq_error=k_err,
            value_sq_error=v_err,
            total_sq_error=k_err + v_err,
            discarded_sq_sum=layer_factors.discarded_sq_sum,
            relative_error=float(np.sqrt((k_err + v_err) / total)) if total > 0 else 0.0,
            max_abs_error=max(max_abs(w_k_nope - k_hat), max_abs(w_v - v_hat)),
            alternative_sq_error=other,
        ))
    return rows
