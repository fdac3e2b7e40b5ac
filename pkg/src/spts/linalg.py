"""Dense linear algebra and selection primitives.

Matrices are 2-D ``float32`` numpy arrays. Every kernel accumulates in
``float64`` and rounds its result back to ``float32`` once, so results do
not depend on summation order inside BLAS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .counting import add_flops
from .errors import BudgetError, NumericError, ShapeError

F32 = np.float32


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``a @ b`` rounded to float32 and record ``2*m*k*n`` FLOPs."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = (a.astype(np.float64) @ b.astype(np.float64)).astype(F32)
    add_flops(2 * a.shape[0] * a.shape[1] * b.shape[1])
    return _check_finite(out, "matmul")


def softmax_row(x, scale: float = 1.0) -> np.ndarray:
    """Numerically stable softmax of ``scale * x``."""
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size == 0:
        raise ShapeError("softmax of an empty vector")
    if not scale > 0:
        raise BudgetError("softmax scale must be positive")
    z = v * scale
    z = np.exp(z - z.max())
    return (z / z.sum()).astype(F32)


def softmax_masked(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax in float64 over entries where ``mask`` is True.

    Each row must keep at least one entry. Returns float64 so callers can
    chain further accumulation before rounding.
    """
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ascending by index.

    Ties go to the smaller index.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if k < 0 or k > s.size:
        raise BudgetError(f"k={k} outside [0, {s.size}]")
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:k]).astype(np.int64)


@dataclass(frozen=True)
class SvdFactors:
    U: np.ndarray  # rows x r, orthonormal columns
    S: np.ndarray  # r, descending
    V: np.ndarray  # r x cols

    @property
    def rank(self) -> int:
        return int(self.S.size)

    def reconstruct(self) -> np.ndarray:
        return ((self.U.astype(np.float64) * self.S.astype(np.float64)) @ self.V.astype(np.float64)).astype(F32)

    def folded(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(U, diag(S) @ V)`` so the product needs two factors."""
        return self.U, (self.S.astype(np.float64)[:, None] * self.V.astype(np.float64)).astype(F32)


def svd_truncated(w: np.ndarray, r: int) -> SvdFactors:
    """Rank-``r`` truncated SVD with a fixed sign convention.

    In every column of ``U`` the entry of largest magnitude is made
    non-negative (first such entry on ties); the matching row of ``V`` is
    flipped with it.
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {w.shape}")
    if r <= 0 or r > min(w.shape):
        raise BudgetError(f"rank {r} outside [1, {min(w.shape)}]")
    _check_finite(w, "svd input")
    u, s, vt = np.linalg.svd(w.astype(np.float64), full_matrices=False)
    u, s, vt = u[:, :r], s[:r], vt[:r]
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(r)] < 0, -1.0, 1.0)
    u = u * signs
    vt = vt * signs[:, None]
    return SvdFactors(U=u.astype(F32), S=s.astype(F32), V=vt.astype(F32))


def silu(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    return (v / (1.0 + np.exp(-v))).astype(F32)


def rmsnorm(x, g, eps: float) -> np.ndarray:
    """Row-wise RMS normalization scaled by gain ``g``.

    ``eps`` is rounded to float32 first so configs that differ only by
    float32 round-off normalize identically.
    """
    v = np.asarray(x, dtype=np.float64)
    gain = np.asarray(g, dtype=np.float64)
    if v.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"gain length {gain.shape[-1]} != width {v.shape[-1]}")
    e = float(F32(eps))
    if e < 0:
        raise BudgetError("eps must be non-negative")
    ms = np.mean(v * v, axis=-1, keepdims=True)
    denom = np.sqrt(ms + e)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(denom > 0, v / denom, 0.0) * gain
    return out.astype(F32)


def cosine_sim(a, b) -> float:
    """Cosine similarity; 0.0 when either vector is zero."""
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch {x.size} vs {y.size}")
    nx, ny = math.sqrt(float(x @ x)), math.sqrt(float(y @ y))
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.clip((x @ y) / (nx * ny), -1.0, 1.0))


def row_norms(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.sum(v * v, axis=-1))
