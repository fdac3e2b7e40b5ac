"""Low-rank transformation probing for feed-forward skipping.

Offline, hidden states collected in front of each FFN rank the
intermediate channels by activation saliency; the strongest ``D_low``
channels of the gate/up/down projections are kept and each sliced matrix
is replaced by a rank-``r`` SVD factor pair. Online, the norm of this
proxy's output, multiplied by the attention probe score, ranks tokens for
the reduced FFN.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensorfile
from .counting import add_flops, flop_category
from .errors import BudgetError, FormatError, InputError, OrderingError, ShapeError
from .kvcache import KvCache
from .linalg import F32, matmul, rmsnorm, row_norms, silu, svd_truncated, topk_indices
from .model import LayerWeights, Model, embed_tokens, ffn, full_block_forward
from .pap import ScoreVector

DEFAULT_RHO = 0.2


def collect_calibration(model: Model, sequences: Sequence[Sequence[int]], layers: Iterable[int] | None = None) -> dict[int, np.ndarray]:
    """Post-norm FFN inputs of every calibration token, per layer.

    Runs the unmodified (non-skipping) forward pass. ``layers`` are
    0-based layer indices; all layers by default. Returns a ``|G| x D``
    matrix per requested layer.
    """
    if not sequences or any(len(s) == 0 for s in sequences):
        raise InputError("calibration needs at least one non-empty sequence")
    wanted = set(range(model.config.num_layers) if layers is None else layers)
    rows: dict[int, list[np.ndarray]] = {l: [] for l in sorted(wanted)}

    def hook(layer, normed):
        if layer in rows:
            rows[layer].append(normed.copy())

    last = max(wanted) if wanted else -1
    for seq in sequences:
        x = embed_tokens(model, seq)
        pos = np.arange(len(seq))
        cache = KvCache.for_config(model.config)
        for layer in range(last + 1):
            x = full_block_forward(model, layer, x, cache, pos, on_ffn_input=hook)
    return {l: np.concatenate(v, axis=0) for l, v in rows.items()}


def saliency(G: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray) -> np.ndarray:
    """``|silu(x W_gate) * (x W_up)|`` for each row of ``G``."""
    return np.abs(silu(matmul(G, w_gate)) * matmul(G, w_up))


def top_rho_count(rho: float, n: int) -> int:
    if not 0 < rho <= 1:
        raise BudgetError(f"rho={rho} outside (0, 1]")
    # round first so 0.1 * 30 counts as 3, not 4
    return max(1, math.ceil(round(rho * n, 9)))


def channel_importance(G: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray, rho: float = DEFAULT_RHO) -> np.ndarray:
    """Per-channel mean of the top ``ceil(rho*|G|)`` saliency values."""
    G = np.asarray(G, dtype=F32)
    if G.ndim != 2 or G.shape[0] < 1:
        raise InputError("calibration set must hold at least one vector")
    k = top_rho_count(rho, G.shape[0])
    z = np.sort(saliency(G, w_gate, w_up).astype(np.float64), axis=0)[::-1]
    return z[:k].mean(axis=0).astype(F32)


@dataclass
class LayerProxy:
    channels: np.ndarray  # D_low ascending channel indices
    gate_u: np.ndarray  # D x r
    gate_v: np.ndarray  # r x D_low, singular values folded in
    up_u: np.ndarray
    up_v: np.ndarray
    down_u: np.ndarray
    down_v: np.ndarray

    @property
    def rank(self) -> int:
        return self.gate_u.shape[1]

    @property
    def d_low(self) -> int:
        return self.channels.size

    @property
    def hidden_dim(self) -> int:
        return self.gate_u.shape[0]


def build_proxy(lw: LayerWeights, importance: np.ndarray, d_low: int, rank: int) -> LayerProxy:
    D, d_ff = lw.w_gate.shape
    if not 1 <= d_low <= d_ff:
        raise BudgetError(f"d_low={d_low} outside [1, {d_ff}]")
    if not 1 <= rank <= min(D, d_low):
        raise BudgetError(f"rank={rank} outside [1, {min(D, d_low)}]")
    if np.asarray(importance).size != d_ff:
        raise ShapeError(f"importance has {np.asarray(importance).size} entries, expected {d_ff}")
    channels = topk_indices(importance, d_low)
    factors = {}
    for name in ("gate", "up", "down"):
        w = getattr(lw, f"w_{name}")[:, channels]
        factors[f"{name}_u"], factors[f"{name}_v"] = svd_truncated(w, rank).folded()
    return LayerProxy(channels=channels, **factors)


def proxy_forward(X: np.ndarray, p: LayerProxy) -> np.ndarray:
    """Proxy FFN output; costs ``2*(3*D*r + 3*r*D_low + D_low)`` FLOPs per row."""
    X = np.asarray(X, dtype=F32)
    if X.ndim != 2 or X.shape[1] != p.hidden_dim:
        raise ShapeError(f"proxy expects width {p.hidden_dim}, got {X.shape}")
    gate = silu(matmul(matmul(X, p.gate_u), p.gate_v))
    up = matmul(matmul(X, p.up_u), p.up_v)
    h = gate * up
    add_flops(2 * X.shape[0] * p.d_low)
    return matmul(matmul(h, p.down_v.T), p.down_u.T)


def ffn_scores(X_normed: np.ndarray, p: LayerProxy | None, s_mha: ScoreVector, positions=None) -> tuple[ScoreVector, ScoreVector]:
    """Transformation magnitude and its attention-conditioned score.

    Returns ``(C, S)`` with ``C[n] = ||f(x_n)||`` and ``S[n] = C[n] * S_mha[n]``.
    Without a proxy ``C`` is all ones, so ``S`` falls back to the
    attention score alone.
    """
    if positions is not None and not np.array_equal(np.asarray(positions), s_mha.positions):
        raise OrderingError("attention scores are not aligned with the FFN rows")
    if X_normed.shape[0] != len(s_mha):
        raise OrderingError(f"{X_normed.shape[0]} rows for {len(s_mha)} attention scores")
    if p is None:
        c = np.ones(len(s_mha), dtype=np.float64)
    else:
        with flop_category("ltp"):
            c = row_norms(proxy_forward(X_normed, p))
    s = c * s_mha.values.astype(np.float64)
    return ScoreVector(s_mha.positions, c.astype(F32)), ScoreVector(s_mha.positions, s.astype(F32))


def reduced_ffn(model: Model, layer: int, X: np.ndarray, active) -> np.ndarray:
    """FFN residual update applied to ``active`` rows only."""
    idx = np.asarray(active, dtype=np.int64).ravel()
    if idx.size == 0:
        raise BudgetError("empty active set")
    lw = model.layers[layer]
    x_hat = X[idx]
    out = X.copy()
    out[idx] = x_hat + ffn(lw, rmsnorm(x_hat, lw.ffn_norm, model.config.norm_eps))
    return out


def proxy_error(lw: LayerWeights, p: LayerProxy, X_normed: np.ndarray) -> float:
    """Relative Frobenius error of the proxy against the real FFN."""
    ref = ffn(lw, X_normed).astype(np.float64)
    approx = proxy_forward(X_normed, p).astype(np.float64)
    denom = np.linalg.norm(ref)
    return float(np.linalg.norm(ref - approx) / denom) if denom else 0.0


# --- serialization ------------------------------------------------------

_FACTORS = {
    "gate.U": "gate_u", "gate.V": "gate_v", "up.U": "up_u",
    "up.V": "up_v", "down.U": "down_u", "down.V": "down_v",
}


def proxies_to_tensors(proxies: dict[int, LayerProxy]) -> dict[str, np.ndarray]:
    out = {}
    for layer in sorted(proxies):
        p = proxies[layer]
        prefix = f"layer{layer + 1}.proxy"
        out[f"{prefix}.channels"] = p.channels.astype(F32)
        for suffix, attr in _FACTORS.items():
            out[f"{prefix}.{suffix}"] = getattr(p, attr)
    return out


def proxies_from_tensors(tensors: dict[str, np.ndarray]) -> dict[int, LayerProxy]:
    grouped: dict[int, dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        parts = name.split(".", 2)
        if len(parts) != 3 or parts[1] != "proxy" or not parts[0].startswith("layer"):
            raise FormatError(f"unknown tensor name {name}")
        try:
            layer = int(parts[0][5:]) - 1
        except ValueError as exc:
            raise FormatError(f"unknown tensor name {name}") from exc
        grouped.setdefault(layer, {})[parts[2]] = arr
    proxies = {}
    for layer, t in sorted(grouped.items()):
        want = {"channels", *_FACTORS}
        if set(t) != want:
            raise FormatError(f"layer{layer + 1}: proxy tensors {sorted(t)} do not match {sorted(want)}")
        channels = t["channels"].reshape(-1).astype(np.int64)
        p = LayerProxy(channels=channels, **{attr: t[s] for s, attr in _FACTORS.items()})
        if p.gate_v.shape[1] != p.d_low or p.down_u.shape != p.gate_u.shape:
            raise FormatError(f"layer{layer + 1}: inconsistent proxy shapes")
        proxies[layer] = p
    return proxies


def save_proxies(proxies: dict[int, LayerProxy], path: str | os.PathLike) -> None:
    tensorfile.write_tensors(path, proxies_to_tensors(proxies))


def load_proxies(path: str | os.PathLike) -> dict[int, LayerProxy]:
    return proxies_from_tensors(tensorfile.read_tensors(path))


def calibrate(model: Model, sequences, d_low: int, rank: int, rho: float = DEFAULT_RHO, layers=None):
    """Build proxies for ``layers`` (0-based; all by default).

    Returns ``(proxies, calibration_sets)``.
    """
    calib = collect_calibration(model, sequences, layers)
    proxies = {}
    for layer, G in calib.items():
        lw = model.layers[layer]
        imp = channel_importance(G, lw.w_gate, lw.w_up, rho)
        proxies[layer] = build_proxy(lw, imp, d_low, rank)
    return proxies, calib
