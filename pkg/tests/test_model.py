import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spts import tensorfile
from spts.errors import FormatError, InputError, OrderingError
from spts.kvcache import KvCache
from spts.model import (
    LLAMA_3_1_8B,
    Model,
    ModelConfig,
    apply_rope,
    embed_tokens,
    full_block_forward,
    gen_toy_model,
    load_model,
    save_model,
)
from spts.pipeline import prefill
from spts.schedule import SkipSchedule

import oracles
from conftest import DEFAULT_CONFIG, SMALL_CONFIG


def _zero_blocks(model):
    layers = []
    for lw in model.layers:
        z = {n: np.zeros_like(getattr(lw, n)) for n in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")}
        layers.append(replace(lw, **z))
    return replace(model, layers=layers)


class TestConfig:
    def test_rejects_mismatched_head_dim(self):
        with pytest.raises(InputError):
            ModelConfig(2, 10, 2, 2, 4, 16, 32)

    def test_rejects_bad_group(self):
        with pytest.raises(InputError):
            ModelConfig(2, 12, 3, 2, 4, 16, 32)

    def test_rejects_zero_count(self):
        with pytest.raises(InputError):
            ModelConfig(0, 8, 2, 2, 4, 16, 32)

    def test_vector_round_trip(self):
        back = ModelConfig.from_vector(LLAMA_3_1_8B.as_vector())
        # eps is stored as float32; rmsnorm rounds it the same way
        assert back == replace(LLAMA_3_1_8B, norm_eps=float(np.float32(1e-5)))


class TestTensorFile:
    def test_hand_built_file(self, tmp_path):
        header = b"w f32 2 2 0\n"
        blob = struct.pack("<Q", len(header)) + header + struct.pack("<4f", 1, 2, 3, 4)
        path = tmp_path / "w.tf"
        path.write_bytes(blob)
        t = tensorfile.read_tensors(path)
        assert list(t) == ["w"]
        assert t["w"].tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_encode_matches_hand_layout(self):
        blob = tensorfile.encode({"w": np.array([[1, 2], [3, 4]], np.float32)})
        header = b"w f32 2 2 0\n"
        assert blob == struct.pack("<Q", len(header)) + header + struct.pack("<4f", 1, 2, 3, 4)

    def test_truncated_payload(self, small_model):
        blob = tensorfile.encode(small_model.to_tensors())
        with pytest.raises(FormatError):
            tensorfile.decode(blob[:-4])

    def test_trailing_bytes(self):
        blob = tensorfile.encode({"a": np.ones((1, 2), np.float32)})
        with pytest.raises(FormatError):
            tensorfile.decode(blob + b"\0\0\0\0")

    def test_header_overruns_file(self):
        with pytest.raises(FormatError):
            tensorfile.decode(struct.pack("<Q", 100) + b"a f32 1 1 0\n")

    def test_gap_in_offsets(self):
        header = b"a f32 1 1 4\n"
        with pytest.raises(FormatError):
            tensorfile.decode(struct.pack("<Q", len(header)) + header + b"\0" * 8)

    def test_wrong_dtype(self):
        header = b"a f64 1 1 0\n"
        with pytest.raises(FormatError):
            tensorfile.decode(struct.pack("<Q", len(header)) + header + b"\0" * 8)

    def test_unknown_tensor_name(self, small_model, tmp_path):
        t = small_model.to_tensors()
        t["layer1.bogus"] = np.zeros((1, 1), np.float32)
        path = tmp_path / "m.tf"
        tensorfile.write_tensors(path, t)
        with pytest.raises(FormatError):
            load_model(path)

    def test_missing_tensor(self, small_model):
        t = small_model.to_tensors()
        del t["lm_head"]
        with pytest.raises(FormatError):
            Model.from_tensors(t)

    @settings(max_examples=50)
    @given(st.dictionaries(st.from_regex(r"[a-z][a-z0-9_.]{0,8}", fullmatch=True), st.tuples(st.integers(0, 4), st.integers(0, 4)), max_size=5))
    def test_round_trip(self, shapes):
        rng = np.random.default_rng(0)
        t = {k: rng.standard_normal(s).astype(np.float32) for k, s in shapes.items()}
        blob = tensorfile.encode(t)
        back = tensorfile.decode(blob)
        assert list(back) == list(t)
        for k in t:
            assert np.array_equal(back[k], t[k])
        assert tensorfile.encode(back) == blob


class TestModelIo:
    def test_save_load_save_identical(self, small_model, tmp_path):
        a, b = tmp_path / "a.tf", tmp_path / "b.tf"
        save_model(small_model, a)
        save_model(load_model(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_generation_is_deterministic(self):
        a = tensorfile.encode(gen_toy_model(SMALL_CONFIG, 7).to_tensors())
        b = tensorfile.encode(gen_toy_model(SMALL_CONFIG, 7).to_tensors())
        c = tensorfile.encode(gen_toy_model(SMALL_CONFIG, 8).to_tensors())
        assert a == b
        assert a != c

    def test_weight_scale(self):
        m = gen_toy_model(DEFAULT_CONFIG, 42)
        assert m.embed.shape == (256, 64) and m.lm_head.shape == (64, 256)
        assert float(np.std(m.layers[0].w_gate)) == pytest.approx(1 / 8, rel=0.05)

    def test_default_config_prefill_smoke(self, toy_model):
        out = prefill(toy_model, SkipSchedule.disabled(), list(range(12)))
        assert out.logits.shape == (256,)
        assert np.all(np.isfinite(out.logits))


class TestRope:
    def test_position_zero_is_identity(self, rng):
        x = rng.standard_normal((1, 8)).astype(np.float32)
        assert np.array_equal(apply_rope(x, [0], 2, 4, 1e4), x)

    def test_matches_scalar_oracle(self, rng):
        x = rng.standard_normal((3, 12)).astype(np.float32)
        out = apply_rope(x, [0, 5, 17], 2, 6, 1e4)
        for i, p in enumerate([0, 5, 17]):
            for h in range(2):
                ref = oracles.rope_vec(x[i, h * 6 : (h + 1) * 6], p, 1e4)
                np.testing.assert_allclose(out[i, h * 6 : (h + 1) * 6], ref, rtol=1e-5, atol=1e-6)

    def test_odd_channel_untouched(self, rng):
        x = rng.standard_normal((2, 5)).astype(np.float32)
        out = apply_rope(x, [3, 9], 1, 5, 1e4)
        assert np.array_equal(out[:, 4], x[:, 4])

    def test_preserves_norm(self, rng):
        x = rng.standard_normal((4, 16)).astype(np.float32)
        out = apply_rope(x, [1, 2, 30, 400], 2, 8, 1e4)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(x, axis=1), rtol=1e-5)


class TestFullBlock:
    def test_zero_weights_are_identity(self, small_model, rng):
        model = _zero_blocks(small_model)
        X = rng.standard_normal((5, 8)).astype(np.float32)
        out = full_block_forward(model, 0, X, KvCache.for_config(model.config), range(5))
        assert np.array_equal(out, X)

    def test_single_token_matches_oracle(self, small_model):
        cfg, lw = small_model.config, small_model.layers[0]
        X = embed_tokens(small_model, [5])
        out = full_block_forward(small_model, 0, X, KvCache.for_config(cfg), [0])
        # one key: attention output is that token's value
        x = X[0].astype(np.float64)
        normed = oracles.rmsnorm(x, lw.attn_norm, cfg.norm_eps)
        y = x + (normed @ lw.wv.astype(np.float64)) @ lw.wo.astype(np.float64)
        z = y + oracles.ffn_transform(lw, oracles.rmsnorm(y, lw.ffn_norm, cfg.norm_eps)[None])[0]
        np.testing.assert_allclose(out[0], z, rtol=1e-5, atol=1e-6)

    def test_matches_loop_oracle(self, gqa_model, rng):
        cfg, lw = gqa_model.config, gqa_model.layers[1]
        X = rng.standard_normal((7, cfg.hidden_dim)).astype(np.float32)
        pos = [0, 2, 3, 7, 8, 11, 20]
        out = full_block_forward(gqa_model, 1, X, KvCache.for_config(cfg), pos)
        y = oracles.mha_layer(cfg, lw, X, pos)
        z, _ = oracles.ffn_layer(cfg, lw, y)
        np.testing.assert_allclose(out, z, rtol=1e-5, atol=1e-5)

    def test_causality(self, small_model, rng):
        X = rng.standard_normal((4, 8)).astype(np.float32)
        cfg = small_model.config
        full = full_block_forward(small_model, 1, X, KvCache.for_config(cfg), range(4))
        for n in range(1, 4):
            part = full_block_forward(small_model, 1, X[:n], KvCache.for_config(cfg), range(n))
            np.testing.assert_allclose(part, full[:n], rtol=0, atol=1e-6)

    def test_appends_all_rows_to_cache(self, small_model, rng):
        cache = KvCache.for_config(small_model.config)
        full_block_forward(small_model, 0, rng.standard_normal((3, 8)).astype(np.float32), cache, [1, 4, 6])
        assert cache[0].positions.tolist() == [1, 4, 6]
        assert len(cache[1]) == 0

    def test_positions_must_increase(self, small_model):
        X = np.zeros((2, 8), np.float32)
        with pytest.raises(OrderingError):
            full_block_forward(small_model, 0, X, KvCache.for_config(small_model.config), [3, 3])

    def test_token_out_of_vocab(self, small_model):
        with pytest.raises(InputError):
            embed_tokens(small_model, [32])

    def test_whole_model_matches_oracle(self, toy_model):
        ids = [3, 141, 59, 26, 5, 35, 89, 79, 32, 38]
        logits, _ = oracles.forward(toy_model, ids)
        out = prefill(toy_model, SkipSchedule.disabled(), ids)
        np.testing.assert_allclose(out.logits, logits, rtol=1e-4, atol=1e-4)
