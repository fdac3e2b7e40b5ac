"""Cost model and fidelity diagnostics.

FLOPs follow the usual ``2*m*k*n`` GEMM convention. Attention is charged
``4*d`` per head for every unmasked query/key pair (scores plus the value
mix), so a causal prefill over ``n`` tokens costs ``4*H*d*n(n+1)/2``.
Norms, rotary embeddings and softmax are not charged. The engine records
exactly the same quantities at run time (see :mod:`spts.counting`), which
is how the closed form is cross-checked.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .linalg import cosine_sim, rmsnorm, topk_indices
from .model import Model, ModelConfig
from .pap import pap_scores
from .pipeline import prefill
from .schedule import SkipSchedule


def proxy_projection_flops(hidden_dim: int, d_low: int | None, rank: int | None) -> int:
    """Per-token cost of one proxy projection, counted in multiply-adds.

    ``None`` for ``d_low`` keeps every intermediate channel (pass
    ``ffn_dim`` instead); ``None`` for ``rank`` means no factorization.
    """
    if d_low is None:
        raise InputError("pass the full intermediate width when channels are not reduced")
    if rank is None:
        return hidden_dim * d_low
    return rank * (hidden_dim + d_low)


def ltp_probe_flops_per_token(hidden_dim: int, d_low: int, rank: int) -> int:
    return 2 * (3 * hidden_dim * rank + 3 * rank * d_low + d_low)


def _attn_pairs(n: int) -> int:
    return n * (n + 1) // 2


def _probe_pairs(n: int, q: int) -> int:
    return q * n - q * (q - 1) // 2


@dataclass(frozen=True)
class LayerFlops:
    layer: int
    skip: bool
    baseline: int
    block: int
    pap: int = 0
    ltp: int = 0

    @property
    def spts(self) -> int:
        return self.block + self.pap + self.ltp


@dataclass(frozen=True)
class PhaseFlops:
    baseline: int
    block: int
    pap: int = 0
    ltp: int = 0

    @property
    def spts(self) -> int:
        return self.block + self.pap + self.ltp

    @property
    def reduction_ratio(self) -> float:
        return self.baseline / self.spts if self.spts else 1.0


@dataclass(frozen=True)
class FlopsReport:
    prefill: PhaseFlops
    decode: PhaseFlops
    layers: list[LayerFlops] = field(default_factory=list)

    @property
    def reduction_ratio(self) -> float:
        return self.prefill.reduction_ratio

    @property
    def e2e_ratio(self) -> float:
        base = self.prefill.baseline + self.decode.baseline
        return base / (self.prefill.spts + self.decode.spts)


def full_layer_flops(cfg: ModelConfig, n: int) -> int:
    D, Hd, kvd = cfg.hidden_dim, cfg.q_width, cfg.kv_width
    proj = 2 * n * D * (Hd + 2 * kvd) + 2 * n * Hd * D
    return proj + 4 * Hd * _attn_pairs(n) + 6 * n * D * cfg.ffn_dim


def skip_layer_flops(cfg: ModelConfig, candidates: int, active: int, probe_len: int, proxy: tuple[int, int] | None):
    """``(block, pap, ltp)`` FLOPs for one skipping layer."""
    D, Hd, kvd = cfg.hidden_dim, cfg.q_width, cfg.kv_width
    c, m, q = candidates, active, min(probe_len, candidates)
    pap = 2 * c * D * kvd + 2 * q * D * Hd + 2 * Hd * _probe_pairs(c, q)
    block = 2 * m * D * (Hd + kvd) + 2 * m * Hd * D + 4 * Hd * _attn_pairs(m) + 6 * m * D * cfg.ffn_dim
    ltp = c * ltp_probe_flops_per_token(D, *proxy) if proxy is not None else 0
    return block, pap, ltp


def decode_flops(cfg: ModelConfig, cache_lengths, steps: int) -> int:
    D, Hd, kvd = cfg.hidden_dim, cfg.q_width, cfg.kv_width
    per_token = 2 * D * (Hd + 2 * kvd) + 2 * Hd * D + 6 * D * cfg.ffn_dim
    total = 0
    for t in range(steps):
        total += 2 * D * cfg.vocab_size
        for length in cache_lengths:
            total += per_token + 4 * Hd * (length + t + 1)
    return total


def flops_report(
    schedule: SkipSchedule,
    cfg: ModelConfig,
    n: int,
    gen_len: int = 0,
    proxy: tuple[int, int] | None = None,
) -> FlopsReport:
    """Closed-form prefill and decode FLOPs, baseline against skipping.

    Args:
        schedule: skipping schedule.
        cfg: model shape.
        n: prompt length.
        gen_len: number of decode steps after prefill.
        proxy: ``(d_low, rank)`` of the FFN proxy; None when FFN tokens are
            ranked by attention scores only.
    """
    head = 2 * cfg.hidden_dim * cfg.vocab_size
    layers = []
    for p in schedule.expand(cfg.num_layers, n):
        base = full_layer_flops(cfg, n)
        if p.skip:
            block, pap, ltp = skip_layer_flops(cfg, p.candidates, p.active, schedule.probe_query_len, proxy)
            layers.append(LayerFlops(p.layer, True, base, block, pap, ltp))
        else:
            layers.append(LayerFlops(p.layer, False, base, full_layer_flops(cfg, p.candidates)))
    pre = PhaseFlops(
        baseline=sum(l.baseline for l in layers) + head,
        block=sum(l.block for l in layers) + head,
        pap=sum(l.pap for l in layers),
        ltp=sum(l.ltp for l in layers),
    )
    lengths = [p.active for p in schedule.expand(cfg.num_layers, n)]
    dec_base = decode_flops(cfg, [n] * cfg.num_layers, gen_len)
    dec = PhaseFlops(baseline=dec_base, block=decode_flops(cfg, lengths, gen_len))
    return FlopsReport(pre, dec, layers)


# --- observational statistics -------------------------------------------


def attention_coverage(attn_row, p: float) -> int:
    """Fewest tokens whose attention mass reaches ``p``."""
    row = np.asarray(attn_row, dtype=np.float64).ravel()
    if row.size == 0 or abs(row.sum() - 1.0) > 1e-5 or np.any(row < 0):
        raise InputError("attention row must be a probability vector")
    if not 0 < p < 1:
        raise InputError(f"coverage level {p} outside (0, 1)")
    csum = np.cumsum(np.sort(row)[::-1])
    # 1e-9 absorbs round-off such as nine 0.1s summing just under 0.9
    return int(np.searchsorted(csum, p - 1e-9, side="left")) + 1


def selection_jaccard(a, b) -> float:
    sa, sb = set(np.asarray(a).ravel().tolist()), set(np.asarray(b).ravel().tolist())
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def mean_row_cosine(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape[0] == 0:
        return 1.0
    return float(np.mean([cosine_sim(x, y) for x, y in zip(a, b)]))


@dataclass
class FidelityReport:
    rows: list[dict]
    logit_max_abs_diff: float
    attention_stats: list[dict]


def fidelity_report(
    model: Model,
    schedule: SkipSchedule,
    prompt_ids,
    proxies=None,
    jaccard_k: int | None = None,
) -> FidelityReport:
    """Run the baseline and the skipping prefill side by side.

    Per layer it reports how close the skipping run's candidate hidden
    states stay to the baseline, and the baseline's block input/output
    cosine for MHA and FFN. ``attention_stats`` holds last-token attention
    coverage at 90%/95% and Jaccard overlap of consecutive layers' token
    sets.
    """
    base = prefill(model, SkipSchedule.disabled(), prompt_ids, trace=True)
    spts = prefill(model, schedule, prompt_ids, proxies, trace=True)
    n = len(prompt_ids)
    k = jaccard_k or max(1, n // 8)
    rows, attention_stats = [], []
    prev_top = prev_active = None
    for b, s in zip(base.records, spts.records):
        ref = b.hidden_out[s.candidates]
        rows.append(
            {
                "layer": b.layer,
                "skip": int(s.skip),
                "candidates": int(s.candidates.size),
                "mha_active": int(s.mha_active.size),
                "ffn_active": int(s.ffn_active.size),
                "spts_vs_base_cos": mean_row_cosine(s.hidden_out, ref),
                "mha_block_cos": mean_row_cosine(b.hidden_in, b.hidden_mid),
                "ffn_block_cos": mean_row_cosine(b.hidden_mid, b.hidden_out),
            }
        )
        lw = model.layers[b.layer - 1]
        normed = rmsnorm(b.hidden_in, lw.attn_norm, model.config.norm_eps)
        attn = pap_scores(model.config, lw, normed, b.candidates)[0].values
        top = topk_indices(attn, min(k, attn.size))
        attention_stats.append(
            {
                "layer": b.layer,
                "coverage_90": attention_coverage(attn, 0.90),
                "coverage_95": attention_coverage(attn, 0.95),
                "jaccard_topk": "" if prev_top is None else selection_jaccard(prev_top, top),
                "jaccard_active": ""
                if prev_active is None or not s.skip
                else selection_jaccard(prev_active, s.mha_active),
            }
        )
        prev_top = top
        prev_active = s.mha_active if s.skip else None
    diff = float(np.max(np.abs(base.logits.astype(np.float64) - spts.logits.astype(np.float64))))
    return FidelityReport(rows, diff, attention_stats)


@contextlib.contextmanager
def stopwatch():
    """Wall-clock timing for humans; never used by the tests."""
    t = {"start": time.monotonic(), "elapsed": 0.0}
    try:
        yield t
    finally:
        t["elapsed"] = time.monotonic() - t["start"]
