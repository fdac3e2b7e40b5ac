"""Stage schedule for token skipping and delayed pruning.

Layers are numbered from 1. Every layer from ``first_skip_layer`` on is a
skipping layer; stage ``s`` covers the layers up to and including
``stage_end_layers[s]``. Layers after the last boundary keep the last
stage's budget and candidate set.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

from .errors import ScheduleError

KILO = 1024


@dataclass(frozen=True)
class LayerPlan:
    layer: int
    skip: bool
    stage: int | None
    candidates: int
    active: int
    pruned_to: int | None = None


@dataclass(frozen=True)
class SkipSchedule:
    first_skip_layer: int
    stage_end_layers: tuple[int, ...] = ()
    budgets: tuple[int, ...] = ()
    prune_amounts: tuple[int, ...] | None = None
    candidate_sizes: tuple[int, ...] | None = None
    probe_query_len: int = 1
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        for name in ("stage_end_layers", "budgets", "prune_amounts", "candidate_sizes"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(int(x) for x in v))
        ends, budgets = self.stage_end_layers, self.budgets
        if self.first_skip_layer < 1:
            raise ScheduleError("first_skip_layer is 1-indexed and must be >= 1")
        if len(budgets) != len(ends):
            raise ScheduleError(f"{len(budgets)} budgets for {len(ends)} stages")
        if any(b <= a for a, b in zip(ends, ends[1:])):
            raise ScheduleError("stage_end_layers must be strictly ascending")
        if ends and self.first_skip_layer > ends[0]:
            raise ScheduleError("first_skip_layer is after the first stage boundary")
        if any(b < 1 for b in budgets):
            raise ScheduleError("budgets must be positive")
        if any(b > a for a, b in zip(budgets, budgets[1:])):
            raise ScheduleError("budgets must be non-increasing across stages")
        if self.prune_amounts is not None and self.candidate_sizes is not None:
            raise ScheduleError("give either prune amounts or candidate sizes, not both")
        for name in ("prune_amounts", "candidate_sizes"):
            v = getattr(self, name)
            if v is not None and len(v) != len(ends):
                raise ScheduleError(f"{name} needs one entry per stage boundary")
        if self.prune_amounts is not None and any(p < 0 for p in self.prune_amounts):
            raise ScheduleError("prune amounts must be non-negative")
        if self.candidate_sizes is not None and any(c < 1 for c in self.candidate_sizes):
            raise ScheduleError("candidate sizes must be positive")
        if self.probe_query_len < 1:
            raise ScheduleError("probe_query_len must be >= 1")

    @classmethod
    def disabled(cls) -> SkipSchedule:
        return cls(first_skip_layer=1 << 30)

    @classmethod
    def uniform(cls, first_skip_layer: int, num_layers: int, budget: int, probe_query_len: int = 1) -> SkipSchedule:
        """One stage spanning every skipping layer, no pruning."""
        return cls(first_skip_layer, (num_layers,), (budget,), (0,), None, probe_query_len)

    def enabled_for(self, num_layers: int) -> bool:
        return self.first_skip_layer <= num_layers

    def validate_for(self, num_layers: int) -> None:
        if not self.enabled_for(num_layers):
            return
        if not self.stage_end_layers:
            raise ScheduleError("skipping enabled but no stages defined")
        if self.stage_end_layers[-1] > num_layers:
            raise ScheduleError(
                f"stage boundary {self.stage_end_layers[-1]} beyond model depth {num_layers}"
            )

    def is_skip_layer(self, layer: int) -> bool:
        return layer >= self.first_skip_layer and bool(self.stage_end_layers)

    def stage_of(self, layer: int) -> int:
        for s, end in enumerate(self.stage_end_layers):
            if layer <= end:
                return s
        return len(self.stage_end_layers) - 1

    def is_stage_end(self, layer: int) -> bool:
        return layer in self.stage_end_layers

    def budget(self, layer: int) -> int:
        return self.budgets[self.stage_of(layer)]

    def next_candidates(self, stage: int, current: int) -> int:
        if self.candidate_sizes is not None:
            return max(1, min(current, self.candidate_sizes[stage]))
        amount = self.prune_amounts[stage] if self.prune_amounts is not None else 0
        return max(1, current - amount)

    def expand(self, num_layers: int, n: int) -> list[LayerPlan]:
        """Per-layer candidate and active counts for an ``n``-token prefill."""
        self.validate_for(num_layers)
        plan = []
        cand = n
        for layer in range(1, num_layers + 1):
            if not self.is_skip_layer(layer):
                plan.append(LayerPlan(layer, False, None, cand, cand))
                continue
            s = self.stage_of(layer)
            active = min(cand, self.budgets[s])
            pruned = None
            if self.is_stage_end(layer):
                pruned = self.next_candidates(s, cand)
            plan.append(LayerPlan(layer, True, s, cand, active, pruned))
            if pruned is not None:
                cand = pruned
        return plan

    def to_text(self) -> str:
        lines = [f"first_skip_layer = {self.first_skip_layer}"]
        lines.append("stage_ends = " + ",".join(map(str, self.stage_end_layers)))
        lines.append("budgets = " + ",".join(map(str, self.budgets)))
        if self.prune_amounts is not None:
            lines.append("prune = " + ",".join(map(str, self.prune_amounts)))
        if self.candidate_sizes is not None:
            lines.append("candidates = " + ",".join(map(str, self.candidate_sizes)))
        lines.append(f"probe_query_len = {self.probe_query_len}")
        return "\n".join(lines) + "\n"


def _parse_count(tok: str) -> int:
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([kK]?)\s*", tok)
    if not m:
        raise ScheduleError(f"bad count {tok!r}")
    value = float(m.group(1)) * (KILO if m.group(2) else 1)
    if value != int(value):
        raise ScheduleError(f"count {tok!r} is not a whole number of tokens")
    return int(value)


def _parse_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(_parse_count(t) for t in text.split(","))


_KEYS = {"first_skip_layer", "stage_ends", "budgets", "prune", "candidates", "probe_query_len"}


def parse_schedule(text: str) -> SkipSchedule:
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScheduleError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _KEYS:
            raise ScheduleError(f"line {lineno}: unknown key {key!r}")
        fields[key] = value
    if "first_skip_layer" not in fields:
        raise ScheduleError("missing first_skip_layer")
    return SkipSchedule(
        first_skip_layer=_parse_count(fields["first_skip_layer"]),
        stage_end_layers=_parse_list(fields.get("stage_ends", "")),
        budgets=_parse_list(fields.get("budgets", "")),
        prune_amounts=_parse_list(fields["prune"]) if "prune" in fields else None,
        candidate_sizes=_parse_list(fields["candidates"]) if "candidates" in fields else None,
        probe_query_len=_parse_count(fields.get("probe_query_len", "1")),
    )


def load_schedule(path: str | os.PathLike) -> SkipSchedule:
    with open(path, encoding="utf-8") as fh:
        return parse_schedule(fh.read())


# Schedules used for the three evaluated model families.
PRESETS = {
    "llama": SkipSchedule(10, (13, 18, 23, 28), (9 * KILO, 7 * KILO, 4 * KILO, 2 * KILO), (KILO,) * 4),
    "qwen": SkipSchedule(9, (12, 16, 20, 24), (13 * KILO, 10 * KILO, 7 * KILO, 4 * KILO), (2 * KILO,) * 4),
    "pangu": SkipSchedule(11, (13, 16, 19, 22), (13 * KILO, 10 * KILO, 7 * KILO, 4 * KILO), (2 * KILO,) * 4),
}
