"""End-to-end curriculum loop: candidate evaluation, selection, probe updates,
competence-aware re-sorting, trace recording, and the reporting helpers."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Dataset, EncodedCorpus
from .metrics import (
    COMPETENCE_AWARE,
    DifficultyVector,
    Schedule,
    compute_difficulties,
    loss_difficulty,
    schedules_from_difficulties,
    score_difficulty,
    validate_metric_set,
)
from .scheduler import (
    SELECTION_POLICIES,
    ScopeConfig,
    batch_ppl,
    resort_tail,
    scope_interval,
    select_candidate,
    slice_bounds,
)


class RunnerError(RuntimeError):
    pass


@dataclass(frozen=True)
class Convergence:
    mode: str = "all_exhausted"  # all_exhausted | plateau | max_steps
    rel_tol: float = 1e-4
    patience: int = 5
    max_steps: int | None = None

    def __post_init__(self):
        if self.mode not in ("all_exhausted", "plateau", "max_steps"):
            raise RunnerError(f"unknown convergence mode {self.mode!r}")
        if self.patience < 1:
            raise RunnerError(f"patience must be >= 1, got {self.patience}")
        if self.mode == "max_steps" and not self.max_steps:
            raise RunnerError("max_steps convergence needs max_steps")


@dataclass(frozen=True)
class RunConfig:
    scope: ScopeConfig = field(default_factory=ScopeConfig)
    metrics: tuple[str, ...] = ("d1", "d2", "d3", "d4")
    policy: str = "min"
    dedup: bool = False
    convergence: Convergence = field(default_factory=Convergence)
    refresh_ppl: str = "selected"  # selected (Algorithm-style stale caches) | all
    resort_window: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.policy not in SELECTION_POLICIES:
            raise RunnerError(f"unknown selection policy {self.policy!r}")
        if self.refresh_ppl not in ("selected", "all"):
            raise RunnerError(f"refresh_ppl must be 'selected' or 'all', got {self.refresh_ppl!r}")


@dataclass
class TraceStep:
    step: int
    schedule: int
    t: int
    lo: float
    hi: float
    ids: list[int]
    ppl: dict[int, float]
    loss: float | None
    skipped: bool = False

    def to_json(self) -> dict:
        row = {
            "step": self.step,
            "schedule": self.schedule,
            "t": self.t,
            "lo": self.lo,
            "hi": self.hi,
            "ids": self.ids,
            "ppl": {str(k): v for k, v in sorted(self.ppl.items())},
            "loss": self.loss,
        }
        if self.skipped:
            row["skipped"] = True
        return row


@dataclass
class CurriculumTrace:
    steps: list[TraceStep]
    metadata: dict

    def trained_ids(self) -> list[int]:
        """Every trained sample occurrence, in trace order."""
        return [sid for s in self.steps for sid in s.ids]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_json()) + "\n" for s in self.steps)


@dataclass
class _Candidate:
    t: int
    lo: float
    hi: float
    ids: list[int]
    ppl: float


class _TraceWriter:
    """Append-only JSONL sink, flushed per step so crashes keep progress."""

    def __init__(self, path: str | None):
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def append(self, step: TraceStep) -> None:
        if self._fh:
            self._fh.write(json.dumps(step.to_json()) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _next_candidate(schedule: Schedule, t_start: int, cfg: ScopeConfig, n: int, corpus, probe) -> _Candidate | None:
    """First non-empty sub-curriculum at or after t_start, with its PPL."""
    for t in range(t_start, cfg.T + 1):
        start, stop = slice_bounds(t, cfg, n)
        ids = list(schedule.order[start:stop])
        if ids:
            lo, hi = scope_interval(t, cfg)
            return _Candidate(t, lo, hi, ids, batch_ppl(ids, corpus.by_id, probe))
    return None


def _fresh_metric(metric: str, enc, probe, scorer) -> float:
    return loss_difficulty(enc, probe) if metric == "d3" else score_difficulty(enc, probe, scorer)


def _resort(schedule: Schedule, fraction: float, table: dict[int, DifficultyVector], corpus, probe, scorer, window: int | None) -> None:
    cut = math.floor(fraction * len(schedule.order))
    stop = len(schedule.order) if window is None else min(cut + window, len(schedule.order))
    fresh: dict[int, float] = {}
    for sid in schedule.order[cut:stop]:
        fresh[sid] = _fresh_metric(schedule.metric, corpus.by_id[sid], probe, scorer)
        table[sid].set(schedule.metric, fresh[sid])
    if window is None:
        resort_tail(schedule, fraction, fresh)
    else:
        windowed = schedule.order[cut:stop]
        windowed.sort(key=lambda sid: (fresh[sid], sid))
        schedule.order[cut:stop] = windowed


def run(
    dataset: Dataset,
    probe,
    scorer=None,
    config: RunConfig | None = None,
    trace_path: str | None = None,
    corpus: EncodedCorpus | None = None,
) -> CurriculumTrace:
    """Run the full dynamic-curriculum loop until convergence.

    The probe must be in its base state: initial sorts for d3/d4 are taken
    from it before any update. Returns the complete trace; if trace_path is
    given every step is appended and flushed as it happens, and the partial
    trace survives a mid-run probe failure.
    """
    config = config or RunConfig()
    metric_set = validate_metric_set(config.metrics, probe, scorer)
    if scorer is not None and "d4" not in metric_set:
        raise RunnerError("a scorer was supplied but d4 is not in the metric set")
    if corpus is None:
        corpus = EncodedCorpus.build(dataset)
    n = len(dataset)
    if n == 0:
        raise RunnerError("cannot run on an empty dataset")

    table = compute_difficulties(corpus, metric_set, probe, scorer)
    schedules = schedules_from_difficulties(table, metric_set)
    by_index = {s.index: s for s in schedules}
    candidates: dict[int, _Candidate] = {}
    for s in schedules:
        cand = _next_candidate(s, 1, config.scope, n, corpus, probe)
        if cand is not None:
            candidates[s.index] = cand

    metadata = {
        "config": asdict(config),
        "dataset_digest": dataset.digest(),
        "n_samples": n,
        "schedules": [
            {"index": s.index, "metric": s.metric, "competence_aware": s.competence_aware} for s in schedules
        ],
    }

    rng = np.random.default_rng(config.seed)
    writer = _TraceWriter(trace_path)
    steps: list[TraceStep] = []
    trained: set[int] = set()
    last_index: int | None = None
    prev_loss: float | None = None
    plateau_streak = 0
    step_no = 0
    conv = config.convergence

    try:
        while candidates:
            snapshot = [(i, c.ppl) for i, c in sorted(candidates.items())]
            j = select_candidate(snapshot, config.policy, rng, last_index)
            last_index = j
            sched = by_index[j]
            cand = candidates[j]

            effective = [sid for sid in cand.ids if sid not in trained] if config.dedup else list(cand.ids)
            skipped = config.dedup and not effective
            loss = None
            if not skipped:
                probe.update([probe.payload_of(corpus.by_id[sid]) for sid in effective])
                trained.update(effective)
                for dv in table.values():
                    dv.mark_stale()
                loss = sum(probe.loss(corpus.by_id[sid]) for sid in effective) / len(effective)
                if sched.competence_aware:
                    _resort(sched, cand.hi, table, corpus, probe, scorer, config.resort_window)

            step = TraceStep(
                step=step_no,
                schedule=j,
                t=cand.t,
                lo=cand.lo,
                hi=cand.hi,
                ids=effective,
                ppl=dict(snapshot),
                loss=loss,
                skipped=skipped,
            )
            steps.append(step)
            writer.append(step)
            step_no += 1

            nxt = _next_candidate(sched, cand.t + 1, config.scope, n, corpus, probe)
            if nxt is None:
                del candidates[j]
            else:
                candidates[j] = nxt
            if config.refresh_ppl == "all":
                for i, c in candidates.items():
                    if i != j:
                        c.ppl = batch_ppl(c.ids, corpus.by_id, probe)

            if loss is not None and conv.mode == "plateau":
                if prev_loss is not None:
                    improvement = (prev_loss - loss) / max(abs(prev_loss), 1e-12)
                    plateau_streak = plateau_streak + 1 if improvement < conv.rel_tol else 0
                prev_loss = loss
                if plateau_streak >= conv.patience:
                    break
            if conv.max_steps is not None and step_no >= conv.max_steps:
                break
    finally:
        writer.close()

    return CurriculumTrace(steps=steps, metadata=metadata)


def composition_report(trace: CurriculumTrace, dataset: Dataset, k: int) -> dict:
    """Source-label fractions over the first/last k trained occurrences."""
    if not trace.steps:
        raise RunnerError("composition report needs a non-empty trace")
    if k < 1:
        raise RunnerError(f"k must be >= 1, got {k}")
    occurrences = trace.trained_ids()
    if not occurrences:
        raise RunnerError("trace trained no samples")
    clamped = k > len(occurrences)
    kk = min(k, len(occurrences))

    def fractions(window: Sequence[int]) -> dict[str, float]:
        counts: dict[str, int] = {}
        for sid in window:
            src = dataset.by_id(sid).source
            counts[src] = counts.get(src, 0) + 1
        return {src: c / len(window) for src, c in sorted(counts.items())}

    return {
        "first": fractions(occurrences[:kk]),
        "last": fractions(occurrences[-kk:]),
        "k": kk,
        "clamped": clamped,
    }


def convergence_report(trace: CurriculumTrace) -> str:
    """CSV of per-step probe loss and the chosen batch's PPL."""
    if not trace.steps:
        raise RunnerError("convergence report needs a non-empty trace")
    buf = io.StringIO()
    buf.write("step,mean_probe_loss,batch_ppl\n")
    for s in trace.steps:
        loss = "" if s.loss is None else repr(s.loss)
        buf.write(f"{s.step},{loss},{s.ppl[s.schedule]!r}\n")
    return buf.getvalue()


def corpus_cross_entropy(corpus: EncodedCorpus, probe) -> float:
    """Corpus-level per-token cross entropy (nats) under the probe."""
    total_lp = 0.0
    total_tokens = 0
    for sid in sorted(corpus.by_id):
        enc = corpus.by_id[sid]
        if not enc.tokens:
            continue
        total_lp += sum(probe.logprobs(probe.payload_of(enc)))
        total_tokens += len(enc.tokens)
    if total_tokens == 0:
        raise RunnerError("corpus has no tokens")
    return -total_lp / total_tokens
