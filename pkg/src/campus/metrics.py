"""Per-sample difficulty values d1..d4 and the statically sorted schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .corpus import EncodedCorpus, EncodedSample
from .lexical import DEFAULT_TTR_THRESHOLD, mtld, ttr  # noqa: F401  (re-exported)

ALL_METRICS = ("d1", "d2", "d3", "d4")
COMPETENCE_AWARE = frozenset({"d3", "d4"})


class MetricError(RuntimeError):
    pass


@dataclass
class DifficultyVector:
    d1: int | None = None
    d2: float | None = None
    d3: float | None = None
    d4: float | None = None
    stale_d3: bool = False
    stale_d4: bool = False

    def value(self, metric: str) -> float:
        v = getattr(self, metric)
        if v is None:
            raise MetricError(f"metric {metric} was not computed")
        return v

    def set(self, metric: str, value: float) -> None:
        setattr(self, metric, value)
        if metric in COMPETENCE_AWARE:
            setattr(self, f"stale_{metric}", False)

    def mark_stale(self) -> None:
        """Competence-aware entries go stale whenever the probe state moves."""
        if self.d3 is not None:
            self.stale_d3 = True
        if self.d4 is not None:
            self.stale_d4 = True


@dataclass
class Schedule:
    index: int  # 1-based position within the run's metric set
    metric: str  # one of d1..d4
    order: list[int] = field(repr=False)
    competence_aware: bool = False


def length_difficulty(enc: EncodedSample) -> int:
    """d1: token count of the sample's instruction/input/output content."""
    return enc.content_token_count


def mtld_difficulty(enc: EncodedSample, threshold: float = DEFAULT_TTR_THRESHOLD) -> float:
    """d2: bidirectional MTLD over the content tokens."""
    return mtld(enc.content_tokens, threshold)


def loss_difficulty(enc: EncodedSample, probe) -> float:
    """d3: -sum log P(y_t | x, y_<t) over output-token positions."""
    if enc.mask_from >= len(enc.tokens):
        raise MetricError(f"sample {enc.id} has no output tokens for d3")
    return probe.loss(enc)


def score_difficulty(enc: EncodedSample, probe, scorer) -> float:
    """d4: scoring-model output on concat(z1, z2), in (0, 1)."""
    z1, z2 = probe.features(probe.payload_of(enc), enc.output_mask)
    return scorer.forward_one(list(z1) + list(z2))


def compute_difficulty(
    enc: EncodedSample,
    metric_set: Sequence[str],
    probe=None,
    scorer=None,
    ttr_threshold: float = DEFAULT_TTR_THRESHOLD,
) -> DifficultyVector:
    dv = DifficultyVector()
    for metric in metric_set:
        try:
            if metric == "d1":
                dv.d1 = length_difficulty(enc)
            elif metric == "d2":
                dv.d2 = mtld_difficulty(enc, ttr_threshold)
            elif metric == "d3":
                dv.d3 = loss_difficulty(enc, probe)
            elif metric == "d4":
                dv.d4 = score_difficulty(enc, probe, scorer)
            else:
                raise MetricError(f"unknown metric {metric!r}")
        except MetricError:
            raise
        except Exception as exc:
            raise MetricError(f"metric {metric} failed for sample {enc.id}: {exc}") from exc
    return dv


def validate_metric_set(metric_set: Sequence[str], probe=None, scorer=None) -> tuple[str, ...]:
    ordered = tuple(m for m in ALL_METRICS if m in metric_set)
    if len(ordered) != len(set(metric_set)) or not metric_set:
        bad = set(metric_set) - set(ALL_METRICS)
        raise MetricError(f"metric set must be a non-empty subset of {ALL_METRICS}, got {sorted(bad) or metric_set}")
    if probe is None and COMPETENCE_AWARE & set(ordered):
        raise MetricError("d3/d4 need a probe")
    if scorer is None and "d4" in ordered:
        raise MetricError("d4 needs a trained scorer")
    return ordered


def compute_difficulties(
    corpus: EncodedCorpus,
    metric_set: Sequence[str],
    probe=None,
    scorer=None,
    ttr_threshold: float = DEFAULT_TTR_THRESHOLD,
) -> dict[int, DifficultyVector]:
    metric_set = validate_metric_set(metric_set, probe, scorer)
    return {
        sid: compute_difficulty(corpus.by_id[sid], metric_set, probe, scorer, ttr_threshold)
        for sid in sorted(corpus.by_id)
    }


def schedules_from_difficulties(table: dict[int, DifficultyVector], metric_set: Sequence[str]) -> list[Schedule]:
    ids = sorted(table)
    schedules = []
    for k, metric in enumerate(metric_set, start=1):
        order = sorted(ids, key=lambda sid: (table[sid].value(metric), sid))
        schedules.append(Schedule(index=k, metric=metric, order=order, competence_aware=metric in COMPETENCE_AWARE))
    return schedules


def build_schedules(corpus: EncodedCorpus, metric_set: Sequence[str], probe=None, scorer=None) -> list[Schedule]:
    """One ascending-difficulty schedule per metric; ties break by sample id.

    Competence-aware values (d3, d4) are taken under the probe's state at call
    time, i.e. the initial state when called before any training.
    """
    metric_set = validate_metric_set(metric_set, probe, scorer)
    return schedules_from_difficulties(compute_difficulties(corpus, metric_set, probe, scorer), metric_set)
