"""Prefill with token skipping and delayed pruning, then plain decoding.

Layers before ``first_skip_layer`` run in full. From there on each layer
probes attention to pick the active set for MHA, probes the low-rank
proxy to pick the active set for the FFN, and at stage boundaries the
candidate sequence shrinks to the best-scored tokens. The final prompt
token is kept in every active and candidate set. Decoding never skips.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import InputError, OrderingError, ScheduleError
from .kvcache import KvCache
from .linalg import rmsnorm
from .ltp import LayerProxy, ffn_scores, reduced_ffn
from .model import Model, embed_tokens, ffn_block, final_logits, full_block_forward, mha_block
from .pap import ScoreVector, pap_scores, reduced_mha, select_active
from .schedule import SkipSchedule

log = logging.getLogger(__name__)


@dataclass
class PipelineState:
    hidden: np.ndarray
    positions: np.ndarray
    cache: KvCache
    layer: int = 0
    scores: ScoreVector | None = None


@dataclass
class LayerRecord:
    layer: int  # 1-based
    skip: bool
    stage: int | None
    candidates: np.ndarray
    mha_active: np.ndarray
    ffn_active: np.ndarray
    s_mha: ScoreVector | None = None
    c_ffn: ScoreVector | None = None
    s_ffn: ScoreVector | None = None
    pruned_to: np.ndarray | None = None
    hidden_in: np.ndarray | None = field(default=None, repr=False)
    hidden_mid: np.ndarray | None = field(default=None, repr=False)
    hidden_out: np.ndarray | None = field(default=None, repr=False)


class PrefillOutput(NamedTuple):
    logits: np.ndarray
    cache: KvCache
    records: list[LayerRecord]


def stage_prune(state: PipelineState, n_next: int) -> PipelineState:
    """Keep the ``n_next`` best candidates by the latest attention score.

    The last candidate is always kept. Rows are compacted; cache entries
    already written by earlier layers are left alone.
    """
    if state.scores is None:
        raise ScheduleError("no attention scores available to prune with")
    n = state.hidden.shape[0]
    if n_next < 1:
        raise ScheduleError("cannot prune to fewer than one token")
    if n_next >= n:
        return state
    if not np.array_equal(state.scores.positions, state.positions):
        raise OrderingError("scores do not describe the current candidates")
    keep = select_active(state.scores, n_next, forced=[n - 1])
    return replace(
        state,
        hidden=state.hidden[keep],
        positions=state.positions[keep],
        scores=ScoreVector(state.scores.positions[keep], state.scores.values[keep]),
    )


def prefill(
    model: Model,
    schedule: SkipSchedule,
    token_ids,
    proxies: dict[int, LayerProxy] | None = None,
    trace: bool = False,
) -> PrefillOutput:
    """Process a prompt and return next-token logits plus the KV cache.

    ``proxies`` maps 0-based layer indices to low-rank FFN proxies. When it
    is None the FFN active set is ranked by the attention score alone.
    With ``trace`` every layer's hidden states are kept in the records.
    """
    ids = np.asarray(token_ids, dtype=np.int64).ravel()
    if ids.size == 0:
        raise InputError("empty prompt")
    cfg = model.config
    schedule.validate_for(cfg.num_layers)
    state = PipelineState(
        hidden=embed_tokens(model, ids),
        positions=np.arange(ids.size, dtype=np.int64),
        cache=KvCache.for_config(cfg),
    )
    records: list[LayerRecord] = []
    for li, lw in enumerate(model.layers):
        layer_no = li + 1
        X, pos = state.hidden, state.positions
        n = X.shape[0]
        if not schedule.is_skip_layer(layer_no):
            Y = mha_block(model, li, X, state.cache, pos)
            Z = ffn_block(model, li, Y)
            rec = LayerRecord(layer_no, False, None, pos, pos, pos)
            if trace:
                rec.hidden_in, rec.hidden_mid, rec.hidden_out = X, Y, Z
            state.hidden = Z
            records.append(rec)
            continue

        stage = schedule.stage_of(layer_no)
        m = min(n, schedule.budgets[stage])
        last = [n - 1]
        normed = rmsnorm(X, lw.attn_norm, cfg.norm_eps)
        s_mha, keys = pap_scores(cfg, lw, normed, pos, min(schedule.probe_query_len, n))
        mha_act = select_active(s_mha, m, forced=last)
        Y = reduced_mha(model, li, X, mha_act, keys, state.cache, pos)

        if proxies is not None and li not in proxies:
            raise ScheduleError(f"no FFN proxy for skipping layer {layer_no}")
        proxy = proxies[li] if proxies is not None else None
        c_ffn, s_ffn = ffn_scores(rmsnorm(Y, lw.ffn_norm, cfg.norm_eps), proxy, s_mha)
        ffn_act = select_active(s_ffn, m, forced=last)
        Z = reduced_ffn(model, li, Y, ffn_act)

        state.hidden, state.scores = Z, s_mha
        rec = LayerRecord(layer_no, True, stage, pos, pos[mha_act], pos[ffn_act], s_mha, c_ffn, s_ffn)
        if trace:
            rec.hidden_in, rec.hidden_mid, rec.hidden_out = X, Y, Z
        if schedule.is_stage_end(layer_no):
            state = stage_prune(state, schedule.next_candidates(stage, n))
            rec.pruned_to = state.positions
            log.debug("layer %d: pruned %d -> %d candidates", layer_no, n, state.positions.size)
        records.append(rec)
    state.layer = cfg.num_layers
    logits = final_logits(model, state.hidden[-1])
    return PrefillOutput(logits, state.cache, records)


def decode_step(model: Model, cache: KvCache, token_id: int, position: int) -> np.ndarray:
    """One full forward for a single new token; appends K/V at every layer."""
    if position <= cache.max_position():
        raise OrderingError(f"position {position} is not after cached position {cache.max_position()}")
    x = embed_tokens(model, [token_id])
    pos = np.array([position], dtype=np.int64)
    for li in range(model.config.num_layers):
        x = full_block_forward(model, li, x, cache, pos)
    return final_logits(model, x[0])


def greedy(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties
    return int(np.argmax(logits))


def generate(
    model: Model,
    schedule: SkipSchedule | None,
    prompt_ids,
    n: int,
    proxies: dict[int, LayerProxy] | None = None,
) -> list[int]:
    """Greedy decoding of ``n`` tokens; ``schedule=None`` runs the baseline."""
    if n < 1:
        raise InputError("need to generate at least one token")
    ids = list(prompt_ids)
    out = prefill(model, schedule or SkipSchedule.disabled(), ids, proxies)
    tokens = [greedy(out.logits)]
    for step in range(1, n):
        logits = decode_step(model, out.cache, tokens[-1], len(ids) + step - 1)
        tokens.append(greedy(logits))
    return tokens


def divergence_position(a: list[int], b: list[int]) -> int | None:
    """Index of the first differing token, or None if the sequences agree."""
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return None if len(a) == len(b) else min(len(a), len(b))
