# mlaforge/linalg.py
"""
Dense linear-algebra kernel shared by every other module.

Matrices are plain 2-D numpy arrays. Conversion math runs in float64, the
forward paths in float32; nothing here changes the dtype it is handed except
`thin_svd`, which always works in float64.
"""
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .utils.errors import ConvergenceError, RankError, ShapeError, FormatError

JACOBI_TOLERANCE = 1e-12
JACOBI_MAX_SWEEPS = 60


class SvdResult(BaseModel):
    """Truncated singular value decomposition u · diag(sigma) · vt."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray
    discarded_sq_sum: float
    sweeps: int = 0

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def as_matrix(data, dtype=None, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D array; checkpoint loading goes through here."""
    matrix = np.asarray(data, dtype=dtype)
    if matrix.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {matrix.shape}")
    if matrix.dtype.kind == "f" and not np.all(np.isfinite(matrix)):
        raise FormatError(f"{name}: contains NaN or Inf entries")
    return matrix


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Matrix product with a fixed accumulation order.

    Every output entry is accumulated as ((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...),
    exactly the order of the naive triple loop, so results never depend on
    how many rows are multiplied at once.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k].astype(dtype, copy=False), b[k, :].astype(dtype, copy=False))
    return out


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """
    Row-wise softmax with per-row max subtraction. -inf entries map to 0 and
    a row with no finite entry maps to all zeros.
    """
    row_max = np.max(a, axis=1, keepdims=True)
    row_max = np.where(np.isneginf(row_max), 0.0, row_max)
    weights = np.exp(a - row_max)
    total = np.sum(weights, axis=1, keepdims=True)
    return weights / np.where(total > 0, total, 1.0)


def frobenius_sq(a: np.ndarray) -> float:
    return float(np.sum(np.square(a, dtype=np.float64)))


def max_abs(a: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a)))


def _round_robin_rounds(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Pair schedule for one sweep: n-1 rounds (n rounded up to even) of
    disjoint column pairs, every pair (p, q) with p < q visited once.
    """
    players = list(range(n + (n % 2)))
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            if p >= n or q >= n:
                continue
            ps.append(min(p, q))
            qs.append(max(p, q))
        if ps:
            rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_columns(basis: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Replace the columns flagged in `missing` by unit vectors orthogonal to the rest."""
    basis = basis.copy()
    good = [j for j in range(basis.shape[1]) if not missing[j]]
    for j in np.flatnonzero(missing):
        for i in range(basis.shape[0]):
            candidate = np.zeros(basis.shape[0])
            candidate[i] = 1.0
            for _ in range(2):
                for g in good:
                    candidate -= np.dot(basis[:, g], candidate) * basis[:, g]
            norm = np.linalg.norm(candidate)
            if norm > 0.5:
                basis[:, j] = candidate / norm
                good.append(j)
                break
    return basis


def _jacobi_sweeps(
    work: np.ndarray, tol: float, max_sweeps: int, floor: float = 0.0
) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    One-sided Jacobi on the columns of `work` (rows >= cols). Returns (A·V, V, sweeps).

    Columns whose norm is at or below `floor` are rounding noise and are
    never rotated; `thin_svd` replaces them when it completes the basis.
    """
    floor_sq = floor * floor
    cols = work.shape[1]
    v = np.eye(cols)
    rounds = _round_robin_rounds(cols)
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p, q in rounds:
            up, uq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > floor_sq) & (beta > floor_sq)
            if not active.any():
                continue
            rotated = True
            safe_gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(active, 1.0 / np.hypot(1.0, t), 1.0)
            s = np.where(active, c * t, 0.0)
            work[:, p], work[:, q] = c * up - s * uq, s * up + c * uq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            return work, v, sweep
    raise ConvergenceError(f"Jacobi SVD did not converge after {max_sweeps} sweeps", sweeps=max_sweeps)


def thin_svd(
    a: np.ndarray,
    t: int,
    tol: float = JACOBI_TOLERANCE,
    max_sweeps: int = JACOBI_MAX_SWEEPS,
) -> SvdResult:
    """
    Rank-t truncated SVD by one-sided Jacobi with round-robin cyclic sweeps.

    The leading t triplets are returned; `discarded_sq_sum` is the sum of the
    remaining squared singular values, i.e. the squared Frobenius error of
    the rank-t reconstruction. The largest-magnitude entry of every u column
    is made nonnegative.
    """
    a = as_matrix(a, dtype=np.float64)
    m, n = a.shape
    if t < 0 or t > min(m, n):
        raise RankError(f"thin_svd rank {t} outside [0, {min(m, n)}] for a {m}x{n} matrix")

    transposed = n > m
    work = a.T.copy() if transposed else a.copy()
    # columns at or below this norm carry no signal beyond rounding
    floor = np.sqrt(frobenius_sq(a)) * max(m, n) * np.finfo(np.float64).eps
    work, v, sweeps = _jacobi_sweeps(work, tol, max_sweeps, floor)

    norms = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order]
    work = work[:, order]
    v = v[:, order]

    missing = sigma <= floor
    left = np.divide(work, np.where(missing, 1.0, sigma))
    left = _complete_columns(left, missing) if missing.any() else left

    if transposed:
        u_full, vt_full = v, left.T
    else:
        u_full, vt_full = left, v.T

    pivots = np.argmax(np.abs(u_full), axis=0)
    signs = np.where(u_full[pivots, np.arange(u_full.shape[1])] < 0, -1.0, 1.0)
    u_full = u_full * signs
    vt_full = vt_full * signs[:, None]

    return SvdResult(
        u=u_full[:, :t].copy(),
        sigma=sigma[:t].copy(),
        vt=vt_full[:t, :].copy(),
        discarded_sq_sum=float(np.sum(sigma[t:] ** 2)),
        sweeps=sweeps,
    )
