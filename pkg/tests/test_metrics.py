from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spts.counting import count_flops, flop_category
from spts.errors import InputError
from spts.metrics import (
    attention_coverage,
    fidelity_report,
    flops_report,
    full_layer_flops,
    proxy_projection_flops,
    selection_jaccard,
)
from spts.model import LLAMA_3_1_8B, ModelConfig, gen_toy_model
from spts.pipeline import decode_step, prefill
from spts.schedule import KILO, PRESETS, SkipSchedule

from conftest import DEFAULT_CONFIG

PROMPT = np.random.default_rng(9).integers(0, 256, size=48).tolist()
TIGHT = SkipSchedule(3, (4, 6, 7), (24, 16, 8), (8, 8, 8))


class TestProxyFlops:
    # Per-token cost of one proxy projection, rounded to thousands.
    @pytest.mark.parametrize(
        "d_low,rank,ffn,thousands",
        [
            (512, 128, 14336, 590),
            (512, 256, 14336, 1180),
            (512, None, 14336, 2097),
            (256, 192, 14336, 836),
            (1536, 192, 14336, 1081),
            (None, 192, 11008, 2900),
        ],
    )
    def test_ablation_rows(self, d_low, rank, ffn, thousands):
        assert round(proxy_projection_flops(4096, d_low or ffn, rank) / 1000) == thousands

    def test_default_pair(self):
        # same formula as every other row; the published figure for this pair differs
        assert proxy_projection_flops(4096, 512, 192) == 884_736

    def test_no_channel_count(self):
        with pytest.raises(InputError):
            proxy_projection_flops(4096, None, 192)


class TestFlopsReport:
    def test_disabled_ratio_is_one(self):
        r = flops_report(SkipSchedule.disabled(), LLAMA_3_1_8B, 8 * KILO, 16)
        assert r.reduction_ratio == 1.0 and r.e2e_ratio == 1.0
        assert r.prefill.pap == 0 and r.prefill.ltp == 0

    def test_ratio_increases_with_length(self):
        ratios = [flops_report(PRESETS["llama"], LLAMA_3_1_8B, k * KILO, 16, (512, 192)).reduction_ratio for k in (8, 16, 24, 32)]
        assert ratios[0] > 1
        assert all(b > a for a, b in zip(ratios, ratios[1:]))

    def test_probes_are_charged(self):
        r = flops_report(PRESETS["llama"], LLAMA_3_1_8B, 8 * KILO, 0, (512, 192))
        assert r.prefill.pap > 0 and r.prefill.ltp > 0
        assert r.prefill.spts == r.prefill.block + r.prefill.pap + r.prefill.ltp

    def test_additivity(self):
        sched, cfg, n = PRESETS["llama"], LLAMA_3_1_8B, 16 * KILO
        r = flops_report(sched, cfg, n, 0, (512, 192))
        savings = 0
        for p in sched.expand(cfg.num_layers, n):
            if not p.skip:
                continue
            rec = next(l for l in r.layers if l.layer == p.layer)
            savings += full_layer_flops(cfg, n) - rec.block - rec.pap - rec.ltp
        assert r.prefill.spts + savings == r.prefill.baseline

    def test_full_layer_closed_form(self):
        cfg = ModelConfig(1, 8, 2, 1, 4, 12, 5)
        n = 3
        expect = 2 * n * 8 * (8 + 4 + 4) + 2 * n * 8 * 8 + 4 * 2 * 4 * 6 + 3 * 2 * n * 8 * 12
        assert full_layer_flops(cfg, n) == expect

    @pytest.mark.parametrize(
        "sched",
        [
            SkipSchedule.disabled(),
            TIGHT,
            SkipSchedule(1, (8,), (20,), (0,), probe_query_len=4),
            SkipSchedule(2, (3, 5), (30, 12), candidate_sizes=(40, 10)),
        ],
    )
    @pytest.mark.parametrize("with_proxy", [False, True])
    def test_runtime_counter_matches(self, toy_model, toy_proxies, sched, with_proxy):
        proxies = toy_proxies if with_proxy else None
        with count_flops() as c:
            out = prefill(toy_model, sched, PROMPT, proxies)
        r = flops_report(sched, DEFAULT_CONFIG, len(PROMPT), 0, (64, 16) if with_proxy else None)
        assert (c["block"], c["pap"], c["ltp"]) == (r.prefill.block, r.prefill.pap, r.prefill.ltp)
        with count_flops() as d:
            for step in range(3):
                decode_step(toy_model, out.cache, 1, len(PROMPT) + step)
        r3 = flops_report(sched, DEFAULT_CONFIG, len(PROMPT), 3, (64, 16) if with_proxy else None)
        assert d.total == r3.decode.spts

    def test_baseline_counter_matches(self, toy_model):
        with count_flops() as c:
            prefill(toy_model, SkipSchedule.disabled(), PROMPT)
        assert c.total == flops_report(TIGHT, DEFAULT_CONFIG, len(PROMPT)).prefill.baseline

    def test_categories_nest(self):
        with count_flops() as c:
            with flop_category("pap"):
                from spts.counting import add_flops

                add_flops(5)
            add_flops(2)
        assert (c["pap"], c["block"], c.total) == (5, 2, 7)


class TestCoverage:
    def test_uniform(self):
        assert attention_coverage(np.full(10, 0.1), 0.9) == 9

    @pytest.mark.parametrize("p", [0.01, 0.5, 0.9, 0.99])
    def test_one_hot(self, p):
        row = np.zeros(7)
        row[3] = 1
        assert attention_coverage(row, p) == 1

    def test_not_normalized(self):
        with pytest.raises(InputError):
            attention_coverage([0.5, 0.6], 0.9)

    def test_prefix_sum_oracle(self, rng):
        row = rng.random(40)
        row /= row.sum()
        for p in (0.5, 0.9, 0.95):
            desc = sorted(row, reverse=True)
            k = next(i + 1 for i in range(40) if sum(desc[: i + 1]) >= p)
            assert attention_coverage(row, p) == k

    @settings(max_examples=200)
    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0.0, 1.0)), st.floats(0.01, 0.98), st.floats(0.0, 0.01))
    def test_monotone_in_p(self, raw, p, dp):
        if raw.sum() == 0:
            return
        row = raw / raw.sum()
        assert attention_coverage(row, p) <= attention_coverage(row, min(p + dp, 0.99))


class TestJaccard:
    def test_examples(self):
        assert selection_jaccard([1, 2, 3], [2, 3, 4]) == 0.5
        assert selection_jaccard([1, 2], [2, 1]) == 1.0
        assert selection_jaccard([1], [2]) == 0.0
        assert selection_jaccard([], []) == 1.0


class TestFidelity:
    def test_disabled_unit_cosine(self, toy_model):
        rep = fidelity_report(toy_model, SkipSchedule.disabled(), PROMPT)
        assert all(abs(r["spts_vs_base_cos"] - 1) <= 1e-6 for r in rep.rows)
        assert rep.logit_max_abs_diff == 0.0
        assert len(rep.attention_stats) == 8

    def test_zero_blocks_unit_block_cosine(self):
        model = gen_toy_model(DEFAULT_CONFIG, 42)
        layers = [replace(lw, wo=np.zeros_like(lw.wo), w_down=np.zeros_like(lw.w_down)) for lw in model.layers]
        rep = fidelity_report(replace(model, layers=layers), TIGHT, PROMPT)
        assert all(r["mha_block_cos"] == pytest.approx(1.0) and r["ffn_block_cos"] == pytest.approx(1.0) for r in rep.rows)

    def test_tight_budgets_report(self, toy_model, toy_proxies):
        rep = fidelity_report(toy_model, TIGHT, PROMPT, toy_proxies, jaccard_k=8)
        assert [r["candidates"] for r in rep.rows] == [p.candidates for p in TIGHT.expand(8, len(PROMPT))]
        assert all(-1 <= r["spts_vs_base_cos"] <= 1 for r in rep.rows)
        assert all(1 <= f["coverage_90"] <= f["coverage_95"] for f in rep.attention_stats)
        assert rep.attention_stats[0]["jaccard_topk"] == ""
        assert all(0 <= f["jaccard_topk"] <= 1 for f in rep.attention_stats[1:])
        assert rep.logit_max_abs_diff >= 0
