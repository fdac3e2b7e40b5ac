"""Decoder-only transformer: configuration, weights, and full-block math.

Pre-norm blocks with RMSNorm, rotary embeddings on queries and keys
(driven by each token's original sequence position), grouped-query
attention and a SiLU-gated feed-forward network.

Python indices into ``model.layers`` and the KV cache are 0-based. Layer
numbers that appear in schedules, tensor names and reports are 1-based.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

from . import tensorfile
from .counting import add_flops
from .errors import FormatError, InputError, OrderingError, ShapeError
from .kvcache import KvCache
from .linalg import F32, matmul, rmsnorm, silu, softmax_masked


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    ffn_dim: int
    vocab_size: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    dtype_bytes: int = 2

    def __post_init__(self):
        counts = ("num_layers", "hidden_dim", "num_heads", "num_kv_heads", "head_dim", "ffn_dim", "vocab_size", "dtype_bytes")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise InputError(
                f"hidden_dim {self.hidden_dim} != num_heads {self.num_heads} x head_dim {self.head_dim}"
            )
        if self.num_heads % self.num_kv_heads:
            raise InputError("num_heads must be a multiple of num_kv_heads")
        if not self.rope_theta > 0 or not self.norm_eps >= 0:
            raise InputError("rope_theta must be positive and norm_eps non-negative")

    @property
    def q_width(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def kv_width(self) -> int:
        return self.num_kv_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.num_heads // self.num_kv_heads

    def as_vector(self) -> np.ndarray:
        return np.array([float(getattr(self, f.name)) for f in fields(self)], dtype=np.float32)

    @classmethod
    def from_vector(cls, v) -> ModelConfig:
        v = np.asarray(v, dtype=np.float32).ravel()
        names = [f.name for f in fields(cls)]
        if v.size != len(names):
            raise FormatError(f"config tensor has {v.size} entries, expected {len(names)}")
        kwargs = {}
        for name, x in zip(names, v):
            kwargs[name] = float(x) if name in ("rope_theta", "norm_eps") else int(x)
        return cls(**kwargs)


# Published shapes used by the cost and memory models.
LLAMA_3_1_8B = ModelConfig(32, 4096, 32, 8, 128, 14336, 128256, rope_theta=500000.0)
QWEN_2_5_7B = ModelConfig(28, 3584, 28, 4, 128, 18944, 152064, rope_theta=1000000.0, norm_eps=1e-6)
CONFIG_PRESETS = {"llama": LLAMA_3_1_8B, "qwen": QWEN_2_5_7B}


@dataclass
class LayerWeights:
    wq: np.ndarray  # D x H*d
    wk: np.ndarray  # D x kv*d
    wv: np.ndarray  # D x kv*d
    wo: np.ndarray  # H*d x D
    w_gate: np.ndarray  # D x D_ff
    w_up: np.ndarray  # D x D_ff
    w_down: np.ndarray  # D x D_ff, applied transposed
    attn_norm: np.ndarray  # D
    ffn_norm: np.ndarray  # D

    def check(self, cfg: ModelConfig) -> None:
        D, F = cfg.hidden_dim, cfg.ffn_dim
        want = {
            "wq": (D, cfg.q_width), "wk": (D, cfg.kv_width), "wv": (D, cfg.kv_width),
            "wo": (cfg.q_width, D), "w_gate": (D, F), "w_up": (D, F), "w_down": (D, F),
            "attn_norm": (D,), "ffn_norm": (D,),
        }
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"{name}: expected {shape}, got {got}")
            if not np.all(np.isfinite(getattr(self, name))):
                raise ShapeError(f"{name}: non-finite weights")


_LAYER_TENSORS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")


@dataclass
class Model:
    config: ModelConfig
    embed: np.ndarray  # vocab x D
    layers: list[LayerWeights]
    final_norm: np.ndarray  # D
    lm_head: np.ndarray  # D x vocab

    def check(self) -> None:
        cfg = self.config
        if len(self.layers) != cfg.num_layers:
            raise ShapeError(f"{len(self.layers)} layers for a {cfg.num_layers}-layer config")
        if self.embed.shape != (cfg.vocab_size, cfg.hidden_dim):
            raise ShapeError(f"embed: bad shape {self.embed.shape}")
        if self.lm_head.shape != (cfg.hidden_dim, cfg.vocab_size):
            raise ShapeError(f"lm_head: bad shape {self.lm_head.shape}")
        if self.final_norm.shape != (cfg.hidden_dim,):
            raise ShapeError(f"final_norm: bad shape {self.final_norm.shape}")
        for lw in self.layers:
            lw.check(cfg)

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {"config": self.config.as_vector(), "embed": self.embed}
        for i, lw in enumerate(self.layers, 1):
            for name in _LAYER_TENSORS:
                out[f"layer{i}.{name}"] = getattr(lw, name)
        out["final_norm"] = self.final_norm
        out["lm_head"] = self.lm_head
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> Model:
        if "config" not in tensors:
            raise FormatError("missing config tensor")
        cfg = ModelConfig.from_vector(tensors["config"])
        expected = {"config", "embed", "final_norm", "lm_head"}
        expected |= {f"layer{i}.{n}" for i in range(1, cfg.num_layers + 1) for n in _LAYER_TENSORS}
        unknown = sorted(set(tensors) - expected)
        if unknown:
            raise FormatError(f"unknown tensor name(s): {', '.join(unknown)}")
        missing = sorted(expected - set(tensors))
        if missing:
            raise FormatError(f"missing tensor(s): {', '.join(missing)}")

        def vec(name):
            return tensors[name].reshape(-1)

        layers = []
        for i in range(1, cfg.num_layers + 1):
            kw = {n: tensors[f"layer{i}.{n}"] for n in _LAYER_TENSORS}
            kw["attn_norm"] = kw["attn_norm"].reshape(-1)
            kw["ffn_norm"] = kw["ffn_norm"].reshape(-1)
            layers.append(LayerWeights(**kw))
        model = cls(cfg, tensors["embed"], layers, vec("final_norm"), tensors["lm_head"])
        try:
            model.check()
        except ShapeError as exc:
            raise FormatError(str(exc)) from exc
        return model


def gen_toy_model(config: ModelConfig, seed: int) -> Model:
    """Seeded random model; matrices are N(0, 1) scaled by 1/sqrt(D)."""
    rng = np.random.default_rng(seed)
    D, F = config.hidden_dim, config.ffn_dim
    scale = 1.0 / np.sqrt(D)

    def mat(r, c):
        return (rng.standard_normal((r, c)) * scale).astype(F32)

    embed = mat(config.vocab_size, D)
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                wq=mat(D, config.q_width),
                wk=mat(D, config.kv_width),
                wv=mat(D, config.kv_width),
                wo=mat(config.q_width, D),
                w_gate=mat(D, F),
                w_up=mat(D, F),
                w_down=mat(D, F),
                attn_norm=np.ones(D, dtype=F32),
                ffn_norm=np.ones(D, dtype=F32),
            )
        )
    lm_head = mat(D, config.vocab_size)
    return Model(config, embed, layers, np.ones(D, dtype=F32), lm_head)


def save_model(model: Model, path: str | os.PathLike) -> None:
    tensorfile.write_tensors(path, model.to_tensors())


def load_model(path: str | os.PathLike) -> Model:
    return Model.from_tensors(tensorfile.read_tensors(path))


def synthetic_token_sequences(vocab_size: int, count: int, length: int, seed: int) -> list[list[int]]:
    rng = np.random.default_rng(seed)
    return [rng.integers(0, vocab_size, size=length).tolist() for _ in range(count)]


# --- block math ---------------------------------------------------------


def check_positions(positions) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.int64).ravel()
    if pos.size and (np.any(np.diff(pos) <= 0) or pos[0] < 0):
        raise OrderingError("positions must be non-negative and strictly increasing")
    return pos


def apply_rope(x: np.ndarray, positions, num_heads: int, head_dim: int, theta: float) -> np.ndarray:
    """Rotate-half rotary embedding; an odd trailing channel is left as is."""
    pos = np.asarray(positions, dtype=np.float64).ravel()
    n = x.shape[0]
    half = head_dim // 2
    v = np.asarray(x, dtype=np.float64).reshape(n, num_heads, head_dim).copy()
    if half == 0:
        return v.reshape(n, -1).astype(F32)
    inv_freq = float(theta) ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = pos[:, None] * inv_freq[None, :]
    cos, sin = np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]
    x1, x2 = v[..., :half].copy(), v[..., half : 2 * half].copy()
    v[..., :half] = x1 * cos - x2 * sin
    v[..., half : 2 * half] = x1 * sin + x2 * cos
    return v.reshape(n, -1).astype(F32)


def attend(cfg: ModelConfig, q: np.ndarray, q_pos, keys: np.ndarray, values: np.ndarray, k_pos) -> np.ndarray:
    """Causal GQA attention; a query sees keys whose position is <= its own.

    Records ``4*d`` FLOPs per head per unmasked query/key pair.
    """
    H, G, d = cfg.num_heads, cfg.group_size, cfg.head_dim
    qp = np.asarray(q_pos, dtype=np.int64).ravel()
    kp = np.asarray(k_pos, dtype=np.int64).ravel()
    mask = kp[None, :] <= qp[:, None]
    if not np.all(mask.any(axis=1)):
        raise OrderingError("a query has no visible keys")
    nq = q.shape[0]
    qh = np.asarray(q, dtype=np.float64).reshape(nq, H, d)
    kh = np.asarray(keys, dtype=np.float64).reshape(-1, cfg.num_kv_heads, d)
    vh = np.asarray(values, dtype=np.float64).reshape(-1, cfg.num_kv_heads, d)
    out = np.empty((nq, H, d), dtype=np.float64)
    scale = 1.0 / np.sqrt(d)
    for h in range(H):
        g = h // G
        p = softmax_masked((qh[:, h, :] @ kh[:, g, :].T) * scale, mask)
        out[:, h, :] = p @ vh[:, g, :]
    add_flops(4 * d * H * int(mask.sum()))
    return out.reshape(nq, H * d).astype(F32)


def project_qkv(cfg: ModelConfig, lw: LayerWeights, normed: np.ndarray, positions):
    q = apply_rope(matmul(normed, lw.wq), positions, cfg.num_heads, cfg.head_dim, cfg.rope_theta)
    k = apply_rope(matmul(normed, lw.wk), positions, cfg.num_kv_heads, cfg.head_dim, cfg.rope_theta)
    v = matmul(normed, lw.wv)
    return q, k, v


def mha_block(model: Model, layer: int, X: np.ndarray, cache: KvCache, positions) -> np.ndarray:
    """``X + MHA(norm(X))`` with every row's K/V appended to the cache."""
    cfg, lw = model.config, model.layers[layer]
    pos = check_positions(positions)
    if X.shape[0] != pos.size:
        raise ShapeError(f"{X.shape[0]} rows for {pos.size} positions")
    normed = rmsnorm(X, lw.attn_norm, cfg.norm_eps)
    q, k, v = project_qkv(cfg, lw, normed, pos)
    lc = cache[layer]
    lc.append(k, v, pos)
    o = attend(cfg, q, pos, lc.keys, lc.values, lc.positions)
    return X + matmul(o, lw.wo)


def ffn(lw: LayerWeights, normed: np.ndarray) -> np.ndarray:
    """SiLU-gated feed-forward transform (no residual)."""
    h = silu(matmul(normed, lw.w_gate)) * matmul(normed, lw.w_up)
    return matmul(h, lw.w_down.T)


def ffn_block(model: Model, layer: int, X: np.ndarray, on_ffn_input=None) -> np.ndarray:
    lw = model.layers[layer]
    normed = rmsnorm(X, lw.ffn_norm, model.config.norm_eps)
    if on_ffn_input is not None:
        on_ffn_input(layer, normed)
    return X + ffn(lw, normed)


def full_block_forward(model: Model, layer: int, X: np.ndarray, cache: KvCache, positions, on_ffn_input=None) -> np.ndarray:
    """Run one unskipped layer: MHA then FFN, each with a residual."""
    X = np.asarray(X, dtype=F32)
    return ffn_block(model, layer, mha_block(model, layer, X, cache, positions), on_ffn_input)


def embed_tokens(model: Model, token_ids) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64).ravel()
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise InputError(f"token id outside [0, {model.config.vocab_size})")
    return model.embed[ids].copy()


def final_logits(model: Model, hidden_row: np.ndarray) -> np.ndarray:
    normed = rmsnorm(hidden_row.reshape(1, -1), model.final_norm, model.config.norm_eps)
    return matmul(normed, model.lm_head)[0]
