"""Dynamic curriculum scheduling: learning scope, segmentation, PPL selection.

The scope function stretches a schedule over T steps (fast early growth,
fine-grained late steps); candidate sub-curricula are compared by batch
perplexity and the cheapest one wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .metrics import Schedule

SELECTION_POLICIES = ("min", "max", "random", "sequential")


class SchedulerError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScopeConfig:
    s1: float = 0.01  # initial scope fraction
    p: float = 2.0  # progression exponent
    T: int = 100  # sub-curricula per schedule

    def __post_init__(self):
        if not 0.0 < self.s1 < 1.0:
            raise ValueError(f"s1 must be in (0, 1), got {self.s1}")
        if self.p < 1.0:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")


@dataclass
class SubCurriculum:
    schedule_index: int
    t: int
    lo: float
    hi: float
    ids: list[int]


def scope(t: int, cfg: ScopeConfig) -> float:
    """Learning-scope fraction at step t: s1 at t=1, 1.0 at t=T."""
    if not 1 <= t <= cfg.T:
        raise SchedulerError(f"step t={t} outside [1, {cfg.T}]")
    if t == 1:
        return cfg.s1
    base = cfg.s1**cfg.p
    return min(1.0, (t * (1.0 - base) / cfg.T + base) ** (1.0 / cfg.p))


def scope_interval(t: int, cfg: ScopeConfig) -> tuple[float, float]:
    """[s(t-1), s(t)) with s(0) = 0; the last interval closes at exactly 1."""
    lo = 0.0 if t == 1 else scope(t - 1, cfg)
    hi = 1.0 if t == cfg.T else scope(t, cfg)
    return lo, hi


def slice_bounds(t: int, cfg: ScopeConfig, n: int) -> tuple[int, int]:
    lo, hi = scope_interval(t, cfg)
    return math.floor(lo * n), math.floor(hi * n)


def segment(schedule: Schedule, cfg: ScopeConfig, n: int) -> list[SubCurriculum]:
    """Split a schedule's order into T sub-curricula partitioning it exactly.

    Slices that round to empty are kept (the runner skips them).
    """
    if n < 1:
        raise SchedulerError(f"dataset size must be >= 1, got {n}")
    out = []
    for t in range(1, cfg.T + 1):
        lo, hi = scope_interval(t, cfg)
        start, stop = slice_bounds(t, cfg, n)
        out.append(SubCurriculum(schedule.index, t, lo, hi, list(schedule.order[start:stop])))
    return out


def sample_ppl(tokens_or_logprobs: Sequence[float]) -> float:
    """exp(-mean logprob): the geometric-mean inverse probability per token."""
    n = len(tokens_or_logprobs)
    if n == 0:
        raise SchedulerError("perplexity of an empty token stream is undefined")
    return math.exp(-sum(tokens_or_logprobs) / n)


def batch_ppl(ids: Sequence[int], encoded: Mapping[int, object], probe) -> float:
    """Mean per-sample perplexity of a batch under the probe.

    Each sample's PPL uses its full rendered token stream; token-less samples
    are skipped, and an all-empty batch is an error.
    """
    if not ids:
        raise SchedulerError("batch_ppl needs a non-empty batch")
    ppls = []
    for sid in ids:
        enc = encoded[sid]
        if len(enc.tokens) == 0:
            continue
        ppls.append(sample_ppl(probe.logprobs(probe.payload_of(enc))))
    if not ppls:
        raise SchedulerError("every sample in the batch has an empty token stream")
    return sum(ppls) / len(ppls)


def select_next(candidates: Sequence[tuple[int, float]]) -> int:
    """Schedule index with the minimum PPL; ties go to the lowest index."""
    if not candidates:
        raise SchedulerError("no candidate schedules left")
    return min(candidates, key=lambda c: (c[1], c[0]))[0]


def select_candidate(
    candidates: Sequence[tuple[int, float]],
    policy: str = "min",
    rng=None,
    last_index: int | None = None,
) -> int:
    """Policy dispatch over (schedule index, PPL) candidates.

    `sequential` cycles 1 -> 2 -> ... -> n among the surviving schedules,
    starting after `last_index`; `random` needs a seeded rng.
    """
    if not candidates:
        raise SchedulerError("no candidate schedules left")
    if policy == "min":
        return select_next(candidates)
    if policy == "max":
        return max(candidates, key=lambda c: (c[1], -c[0]))[0]
    if policy == "random":
        if rng is None:
            raise SchedulerError("random selection needs an rng")
        return candidates[int(rng.integers(len(candidates)))][0]
    if policy == "sequential":
        indices = sorted(c[0] for c in candidates)
        if last_index is None:
            return indices[0]
        for idx in indices:
            if idx > last_index:
                return idx
        return indices[0]
    raise SchedulerError(f"unknown selection policy {policy!r}")


def resort_tail(schedule: Schedule, consumed_fraction: float, metric_values: Mapping[int, float]) -> None:
    """Re-sort the unconsumed tail of a competence-aware schedule in place.

    Positions before floor(consumed_fraction * N) are already trained and must
    stay byte-identical; the tail is re-ordered by the freshly computed metric
    values (ascending, id tie-break).
    """
    if not schedule.competence_aware:
        raise SchedulerError(f"schedule {schedule.index} ({schedule.metric}) is not competence-aware")
    if not 0.0 <= consumed_fraction <= 1.0:
        raise SchedulerError(f"consumed fraction {consumed_fraction} outside [0, 1]")
    cut = math.floor(consumed_fraction * len(schedule.order))
    tail = schedule.order[cut:]
    tail.sort(key=lambda sid: (metric_values[sid], sid))
    schedule.order[cut:] = tail
