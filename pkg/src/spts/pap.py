"""Partial attention probing and reduced multi-head attention.

The probe scores every candidate token by the attention it receives from
the last token (or the last few tokens), averaged over query heads. The
top-scoring tokens form the active set; only they get queries and values
computed, only their keys and values are cached, and only their rows are
updated.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .counting import add_flops, flop_category
from .errors import BudgetError, OrderingError, ShapeError
from .kvcache import KvCache
from .linalg import F32, matmul, rmsnorm, softmax_masked
from .model import LayerWeights, Model, ModelConfig, apply_rope, attend, check_positions, mha_block


@dataclass(frozen=True)
class ScoreVector:
    positions: np.ndarray  # ascending original positions
    values: np.ndarray

    def __post_init__(self):
        if self.positions.shape != self.values.shape:
            raise ShapeError("positions and values differ in length")

    def __len__(self) -> int:
        return int(self.values.size)


def pap_scores(
    cfg: ModelConfig,
    lw: LayerWeights,
    normed: np.ndarray,
    positions,
    query_len: int = 1,
) -> tuple[ScoreVector, np.ndarray]:
    """Probe token contributions from the last ``query_len`` rows.

    Args:
        cfg: model configuration.
        lw: weights of the layer being probed.
        normed: attention-normalized hidden states, one row per candidate.
        positions: original positions of the rows (ascending).
        query_len: number of trailing rows used as probe queries.

    Returns:
        The head-averaged softmax scores and the rotary-embedded keys of
        every row, which the reduced attention reuses.
    """
    pos = check_positions(positions)
    n = normed.shape[0]
    if n < 1 or n != pos.size:
        raise ShapeError(f"{n} rows for {pos.size} positions")
    if not 1 <= query_len <= n:
        raise BudgetError(f"probe query length {query_len} outside [1, {n}]")
    H, G, d = cfg.num_heads, cfg.group_size, cfg.head_dim
    with flop_category("pap"):
        k = apply_rope(matmul(normed, lw.wk), pos, cfg.num_kv_heads, d, cfg.rope_theta)
        q_pos = pos[-query_len:]
        q = apply_rope(matmul(normed[-query_len:], lw.wq), q_pos, H, d, cfg.rope_theta)
        mask = pos[None, :] <= q_pos[:, None]
        qh = q.astype(np.float64).reshape(query_len, H, d)
        kh = k.astype(np.float64).reshape(n, cfg.num_kv_heads, d)
        acc = np.zeros(n, dtype=np.float64)
        for h in range(H):
            p = softmax_masked((qh[:, h, :] @ kh[:, h // G, :].T) / np.sqrt(d), mask)
            acc += p.sum(axis=0)
        add_flops(2 * d * H * int(mask.sum()))
    values = (acc / (H * query_len)).astype(F32)
    return ScoreVector(pos.copy(), values), k


def select_active(scores, budget: int, forced=()) -> np.ndarray:
    """Row indices of the active set, ascending.

    Forced rows are always kept; the remaining ``min(N, budget) - |forced|``
    slots go to the highest scores, ties to the lower index.
    """
    s = np.asarray(scores.values if isinstance(scores, ScoreVector) else scores, dtype=np.float64).ravel()
    n = s.size
    m = min(n, int(budget))
    forced_idx = np.unique(np.asarray(forced, dtype=np.int64))
    if forced_idx.size and (forced_idx[0] < 0 or forced_idx[-1] >= n):
        raise BudgetError("forced index out of range")
    if forced_idx.size > m:
        raise BudgetError(f"budget {m} smaller than {forced_idx.size} forced rows")
    order = np.argsort(-s, kind="stable")
    taken = np.zeros(n, dtype=bool)
    taken[forced_idx] = True
    rest = [i for i in order if not taken[i]][: m - forced_idx.size]
    taken[rest] = True
    return np.flatnonzero(taken).astype(np.int64)


def reduced_mha(
    model: Model,
    layer: int,
    X: np.ndarray,
    active,
    keys: np.ndarray,
    cache: KvCache,
    positions,
) -> np.ndarray:
    """MHA residual update applied to ``active`` rows only.

    ``keys`` are the probe's rotary-embedded keys for every row. Inactive
    rows are returned untouched; active keys/values go to the cache.
    """
    cfg, lw = model.config, model.layers[layer]
    pos = check_positions(positions)
    idx = np.asarray(active, dtype=np.int64).ravel()
    if idx.size == 0:
        raise BudgetError("empty active set")
    if np.any(np.diff(idx) <= 0):
        raise OrderingError("active indices must be ascending and unique")
    act_pos = pos[idx]
    x_hat = X[idx]
    normed = rmsnorm(x_hat, lw.attn_norm, cfg.norm_eps)
    q = apply_rope(matmul(normed, lw.wq), act_pos, cfg.num_heads, cfg.head_dim, cfg.rope_theta)
    v = matmul(normed, lw.wv)
    lc = cache[layer]
    lc.append(keys[idx], v, act_pos)
    o = attend(cfg, q, act_pos, lc.keys, lc.values, lc.positions)
    out = X.copy()
    out[idx] = x_hat + matmul(o, lw.wo)
    return out


def mha_objective_bruteforce(model: Model, layer: int, X: np.ndarray, positions, m: int) -> dict[tuple[int, ...], float]:
    """Last-token error ``||Y_hat[-1] - Y[-1]||`` for every ``m``-subset.

    Exponential in ``N``; intended for diagnostics with ``N <= 12``.
    """
    n = X.shape[0]
    if n > 12:
        raise BudgetError("brute-force objective limited to N <= 12")
    cfg, lw = model.config, model.layers[layer]
    ref = mha_block(model, layer, X, KvCache.for_config(cfg), positions)[-1].astype(np.float64)
    normed = rmsnorm(X, lw.attn_norm, cfg.norm_eps)
    _, keys = pap_scores(cfg, lw, normed, positions)
    errors = {}
    for subset in itertools.combinations(range(n), m):
        y = reduced_mha(model, layer, X, subset, keys, KvCache.for_config(cfg), positions)
        errors[subset] = float(np.linalg.norm(y[-1].astype(np.float64) - ref))
    return errors
