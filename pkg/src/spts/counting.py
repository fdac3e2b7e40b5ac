"""Scoped FLOP accounting shared by the numeric kernels.

Kernels call :func:`add_flops`; nothing is recorded unless a
:class:`FlopCounter` is active. Categories used by the engine are
``block`` (real sub-block compute and the LM head), ``pap`` (attention
probe) and ``ltp`` (low-rank proxy probe).
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict

_state = threading.local()


class FlopCounter:
    def __init__(self) -> None:
        self.totals: dict[str, int] = defaultdict(int)
        self.category = "block"

    @property
    def total(self) -> int:
        return sum(self.totals.values())

    def __getitem__(self, key: str) -> int:
        return self.totals.get(key, 0)


def _stack() -> list[FlopCounter]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _stack().append(counter)
    try:
        yield counter
    finally:
        _stack().pop()


@contextlib.contextmanager
def flop_category(name: str):
    stack = _stack()
    if not stack:
        yield
        return
    counter = stack[-1]
    prev, counter.category = counter.category, name
    try:
        yield
    finally:
        counter.category = prev


def add_flops(n: int) -> None:
    stack = _stack()
    if stack:
        counter = stack[-1]
        counter.totals[counter.category] += int(n)
