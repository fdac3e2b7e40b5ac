"""Per-layer key/value store tagged with original token positions.

Layers may hold different numbers of entries once token skipping has
compressed the cache during prefill.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from .errors import OrderingError, ShapeError

if TYPE_CHECKING:
    from .model import ModelConfig
    from .schedule import SkipSchedule


class LayerCache:
    """Contiguous storage grown by doubling."""

    def __init__(self, width: int):
        self.width = width
        self._keys = np.empty((0, width), dtype=np.float32)
        self._values = np.empty((0, width), dtype=np.float32)
        self._positions = np.empty(0, dtype=np.int64)
        self._len = 0

    def __len__(self) -> int:
        return self._len

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: self._len]

    @property
    def values(self) -> np.ndarray:
        return self._values[: self._len]

    @property
    def positions(self) -> np.ndarray:
        return self._positions[: self._len]

    def _reserve(self, n: int) -> None:
        cap = self._keys.shape[0]
        if n <= cap:
            return
        new_cap = max(n, 2 * cap, 8)
        for attr in ("_keys", "_values"):
            grown = np.empty((new_cap, self.width), dtype=np.float32)
            grown[: self._len] = getattr(self, attr)[: self._len]
            setattr(self, attr, grown)
        pos = np.empty(new_cap, dtype=np.int64)
        pos[: self._len] = self._positions[: self._len]
        self._positions = pos

    def append(self, keys: np.ndarray, values: np.ndarray, positions) -> None:
        pos = np.asarray(positions, dtype=np.int64).ravel()
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        if keys.shape != (pos.size, self.width) or values.shape != keys.shape:
            raise ShapeError(
                f"expected keys/values of shape {(pos.size, self.width)}, got {keys.shape} and {values.shape}"
            )
        if pos.size == 0:
            return
        if np.any(np.diff(pos) <= 0):
            raise OrderingError("appended positions must be strictly increasing")
        if self._len and pos[0] <= self._positions[self._len - 1]:
            raise OrderingError(
                f"position {pos[0]} not after cached position {self._positions[self._len - 1]}"
            )
        n = self._len + pos.size
        self._reserve(n)
        self._keys[self._len : n] = keys
        self._values[self._len : n] = values
        self._positions[self._len : n] = pos
        self._len = n


class KvCache:
    def __init__(self, num_layers: int, width: int):
        self.layers = [LayerCache(width) for _ in range(num_layers)]

    @classmethod
    def for_config(cls, config: ModelConfig) -> KvCache:
        return cls(config.num_layers, config.num_kv_heads * config.head_dim)

    def __getitem__(self, layer: int) -> LayerCache:
        return self.layers[layer]

    def append(self, layer: int, keys, values, positions) -> None:
        self.layers[layer].append(keys, values, positions)

    def lengths(self) -> list[int]:
        return [len(c) for c in self.layers]

    def max_position(self) -> int:
        last = [int(c.positions[-1]) for c in self.layers if len(c)]
        return max(last) if last else -1


def _heads(config: ModelConfig, accounting_heads: int | None) -> int:
    return config.num_heads if accounting_heads is None else accounting_heads


def bytes_for_lengths(lengths, config: ModelConfig, accounting_heads: int | None = None) -> int:
    per_token = 2 * _heads(config, accounting_heads) * config.head_dim * config.dtype_bytes
    return int(sum(lengths)) * per_token


def measured_bytes(cache: KvCache, config: ModelConfig, accounting_heads: int | None = None) -> int:
    """Bytes held by ``cache`` under the chosen accounting convention.

    By default every layer is charged for all ``num_heads`` query heads at
    ``config.dtype_bytes`` per element. Pass ``accounting_heads=
    config.num_kv_heads`` to charge what a GQA cache actually stores.
    """
    return bytes_for_lengths(cache.lengths(), config, accounting_heads)


def predict_bytes(
    schedule: SkipSchedule, config: ModelConfig, n: int, accounting_heads: int | None = None
) -> int:
    """Closed-form cache size after prefilling ``n`` tokens under ``schedule``."""
    plan = schedule.expand(config.num_layers, n)
    return bytes_for_lengths([p.active for p in plan], config, accounting_heads)


def full_bytes(config: ModelConfig, n: int, accounting_heads: int | None = None) -> int:
    return bytes_for_lengths([n] * config.num_layers, config, accounting_heads)
