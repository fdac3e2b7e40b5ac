import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spts.errors import OrderingError, ShapeError
from spts.kvcache import KvCache, LayerCache, full_bytes, measured_bytes, predict_bytes
from spts.model import LLAMA_3_1_8B
from spts.pipeline import decode_step, prefill
from spts.schedule import KILO, PRESETS, SkipSchedule

from conftest import DEFAULT_CONFIG

GIB = 2**30


def _rows(n, w=4, start=0.0):
    return np.full((n, w), start, np.float32)


class TestLayerCache:
    def test_append_three(self):
        c = LayerCache(4)
        c.append(_rows(3), _rows(3, start=1), [0, 1, 2])
        assert len(c) == 3 and c.positions.tolist() == [0, 1, 2]
        assert np.all(c.values == 1)

    def test_position_not_after_max(self):
        c = LayerCache(4)
        c.append(_rows(2), _rows(2), [3, 7])
        with pytest.raises(OrderingError):
            c.append(_rows(1), _rows(1), [7])
        with pytest.raises(OrderingError):
            c.append(_rows(1), _rows(1), [5])

    def test_unsorted_batch(self):
        with pytest.raises(OrderingError):
            LayerCache(4).append(_rows(2), _rows(2), [4, 1])

    def test_shape_checked(self):
        with pytest.raises(ShapeError):
            LayerCache(4).append(_rows(2, w=3), _rows(2, w=3), [0, 1])

    def test_growth_keeps_contents(self, rng):
        c = LayerCache(3)
        keys = rng.standard_normal((50, 3)).astype(np.float32)
        for i in range(50):
            c.append(keys[i : i + 1], keys[i : i + 1] * 2, [i * 2])
        assert np.array_equal(c.keys, keys) and np.array_equal(c.values, keys * 2)
        assert c.positions.tolist() == list(range(0, 100, 2))

    @settings(max_examples=200)
    @given(st.lists(st.lists(st.integers(0, 50), max_size=6), max_size=8))
    def test_positions_stay_unique_and_sorted(self, batches):
        c = LayerCache(1)
        for b in batches:
            pos = sorted(set(b))
            try:
                c.append(_rows(len(pos), 1), _rows(len(pos), 1), pos)
            except OrderingError:
                pass
            assert np.all(np.diff(c.positions) > 0)

    def test_empty_cache_bytes(self):
        assert measured_bytes(KvCache.for_config(LLAMA_3_1_8B), LLAMA_3_1_8B) == 0
        assert KvCache(2, 1).max_position() == -1


class TestAccounting:
    @pytest.mark.parametrize("k,gib", [(8, 4.0), (16, 8.0), (24, 12.0), (32, 16.0)])
    def test_full_cache_table(self, k, gib):
        assert full_bytes(LLAMA_3_1_8B, k * KILO) / GIB == gib
        assert predict_bytes(SkipSchedule.disabled(), LLAMA_3_1_8B, k * KILO) / GIB == gib

    def test_gqa_accounting(self):
        assert full_bytes(LLAMA_3_1_8B, 8 * KILO, accounting_heads=8) / GIB == 1.0

    def test_measured_full_cache(self):
        cache = KvCache(32, 1)
        for layer in range(32):
            cache.append(layer, _rows(8 * KILO, 1), _rows(8 * KILO, 1), np.arange(8 * KILO))
        assert measured_bytes(cache, LLAMA_3_1_8B) / GIB == 4.0

    def test_llama_lengths_at_32k(self):
        lengths = [p.active for p in PRESETS["llama"].expand(32, 32 * KILO)]
        assert lengths == [32768] * 9 + [9216] * 4 + [7168] * 5 + [4096] * 5 + [2048] * 9

    def test_saving_monotone(self):
        sched = PRESETS["llama"]
        # below ~6K the fixed 1K prune per boundary dominates and the trend flips
        savings = [1 - predict_bytes(sched, LLAMA_3_1_8B, n) / full_bytes(LLAMA_3_1_8B, n) for n in range(8 * KILO, 64 * KILO, 512)]
        assert all(b >= a for a, b in zip(savings, savings[1:]))

    @pytest.mark.parametrize(
        "sched",
        [
            SkipSchedule.disabled(),
            SkipSchedule(3, (4, 6, 7), (48, 32, 16), (16, 16, 16)),
            SkipSchedule(1, (2, 8), (10, 3), (5, 0)),
            SkipSchedule(2, (3, 5), (20, 20), candidate_sizes=(30, 4)),
        ],
    )
    @pytest.mark.parametrize("n", [1, 17, 64])
    def test_predicted_equals_measured(self, toy_model, sched, n):
        ids = list(range(n))
        out = prefill(toy_model, sched, ids)
        assert measured_bytes(out.cache, DEFAULT_CONFIG) == predict_bytes(sched, DEFAULT_CONFIG, n)

    def test_decode_keeps_invariants(self, toy_model):
        sched = SkipSchedule(3, (4, 6, 7), (24, 16, 8), (8, 8, 8))
        out = prefill(toy_model, sched, list(range(40)))
        lengths = out.cache.lengths()
        for step in range(3):
            decode_step(toy_model, out.cache, 0, 40 + step)
        assert out.cache.lengths() == [n + 3 for n in lengths]
        for layer in out.cache.layers:
            assert np.all(np.diff(layer.positions) > 0)
            assert layer.positions[-3:].tolist() == [40, 41, 42]
