"""Competence probes: token log-probabilities, losses, features, updates.

A probe stands in for the model being tuned. The reference implementation is
an additive-smoothed n-gram language model whose every number is checkable by
hand; remote.py adapts external models behind the same interface.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass
from typing import Sequence

from .corpus import EncodedSample, UNK_ID
from .lexical import DEFAULT_TTR_THRESHOLD, mtld

FEATURE_DIM = 8


class ProbeError(RuntimeError):
    """Base class for probe failures."""


@dataclass
class ProbeReport:
    """Everything the scheduler and scorer read off a probe for one sample."""

    token_logprobs: list[float]
    sample_loss: float
    features_initial: list[float]  # z1, frozen snapshot state
    features_current: list[float]  # z2, current state
    feature_dim: int


class Probe(abc.ABC):
    """Single-owner handle on one logical model; calls are strictly ordered.

    `wants_text` probes (remote models owning their tokenizer) receive the
    rendered text as payload; everything else receives corpus token ids.
    """

    wants_text: bool = False

    @property
    @abc.abstractmethod
    def feature_dim(self) -> int: ...

    @abc.abstractmethod
    def logprobs(self, payload: Sequence[int] | str, mask_from: int = 0) -> list[float]:
        """Per-position log P(w_m | w_1..w_{m-1}) in nats; empty payload -> []."""

    @abc.abstractmethod
    def update(self, batch: Sequence[Sequence[int] | str]) -> None:
        """One training step on a batch of payloads."""

    @abc.abstractmethod
    def features(
        self, payload: Sequence[int] | str, output_mask: Sequence[bool] | None = None
    ) -> tuple[list[float], list[float]]:
        """(z1, z2): statistics under the frozen snapshot and the current state."""

    @abc.abstractmethod
    def snapshot(self) -> None:
        """Freeze the current state as the z1 baseline."""

    def close(self) -> None:
        pass

    def payload_of(self, enc: EncodedSample) -> Sequence[int] | str:
        return enc.text if self.wants_text else enc.tokens

    def loss(self, enc: EncodedSample) -> float:
        """-sum of output-position logprobs for one encoded sample."""
        lp = self.logprobs(self.payload_of(enc), mask_from=enc.mask_from)
        return -sum(v for v, m in zip(lp, enc.output_mask) if m)

    def report(self, enc: EncodedSample) -> ProbeReport:
        lp = self.logprobs(self.payload_of(enc), mask_from=enc.mask_from)
        loss = -sum(v for v, m in zip(lp, enc.output_mask) if m)
        z1, z2 = self.features(self.payload_of(enc), enc.output_mask)
        return ProbeReport(
            token_logprobs=lp,
            sample_loss=loss,
            features_initial=z1,
            features_current=z2,
            feature_dim=self.feature_dim,
        )


class _NGramState:
    """Counts of an order-n additive-smoothed model; shared by live and snapshot."""

    __slots__ = ("order", "alpha", "vocab_size", "counts", "totals")

    def __init__(self, order: int, alpha: float, vocab_size: int):
        self.order = order
        self.alpha = alpha
        self.vocab_size = vocab_size
        self.counts: dict[tuple[int, ...], dict[int, int]] = {}
        self.totals: dict[tuple[int, ...], int] = {}

    def copy(self) -> "_NGramState":
        dup = _NGramState(self.order, self.alpha, self.vocab_size)
        dup.counts = {ctx: dict(next_counts) for ctx, next_counts in self.counts.items()}
        dup.totals = dict(self.totals)
        return dup

    def _clip(self, token: int) -> int:
        return token if 0 <= token < self.vocab_size else UNK_ID

    def logprob(self, ctx: tuple[int, ...], token: int) -> float:
        c = self.counts.get(ctx)
        count = c.get(token, 0) if c else 0
        total = self.totals.get(ctx, 0)
        return math.log(count + self.alpha) - math.log(total + self.alpha * self.vocab_size)

    def logprobs(self, tokens: Sequence[int]) -> list[float]:
        return self.logprobs_and_coverage(tokens)[0]

    def logprobs_and_coverage(self, tokens: Sequence[int]) -> tuple[list[float], int]:
        """Per-position logprobs plus how many positions had a seen context."""
        ctx_len = self.order - 1
        log = math.log
        alpha = self.alpha
        alpha_v = alpha * self.vocab_size
        counts = self.counts
        totals = self.totals
        out = []
        seen = 0
        clipped = [self._clip(t) for t in tokens]
        for m, tok in enumerate(clipped):
            ctx = tuple(clipped[max(0, m - ctx_len) : m])
            total = totals.get(ctx, 0)
            if total:
                seen += 1
                bucket = counts.get(ctx)
                count = bucket.get(tok, 0) if bucket else 0
            else:
                count = 0
            out.append(log(count + alpha) - log(total + alpha_v))
        return out, seen

    def add(self, tokens: Sequence[int]) -> None:
        ctx_len = self.order - 1
        clipped = [self._clip(t) for t in tokens]
        for m, tok in enumerate(clipped):
            ctx = tuple(clipped[max(0, m - ctx_len) : m])
            bucket = self.counts.setdefault(ctx, {})
            bucket[tok] = bucket.get(tok, 0) + 1
            self.totals[ctx] = self.totals.get(ctx, 0) + 1

    def context_seen(self, ctx: tuple[int, ...]) -> bool:
        return self.totals.get(ctx, 0) > 0


def _state_features(state: _NGramState, tokens: Sequence[int], output_mask: Sequence[bool]) -> list[float]:
    n = len(tokens)
    if n == 0:
        return [0.0] * FEATURE_DIM
    lp, seen = state.logprobs_and_coverage(tokens)
    mean_lp = sum(lp) / n
    var = sum((v - mean_lp) ** 2 for v in lp) / n
    out_lp = [v for v, m in zip(lp, output_mask) if m]
    return [
        mean_lp,
        math.sqrt(var),
        min(lp),
        sum(1 for t in tokens if t == UNK_ID) / n,
        math.log1p(n),
        mtld(tokens, DEFAULT_TTR_THRESHOLD) / 100.0,
        sum(out_lp) / len(out_lp) if out_lp else 0.0,
        seen / n,
    ]


class NGramProbe(Probe):
    """Additive-smoothed n-gram reference probe (default: bigram, alpha=1).

    The snapshot taken at construction is the z1 baseline; update() only ever
    adds counts, so every smoothed conditional stays a proper distribution.
    """

    def __init__(self, vocab_size: int, order: int = 2, alpha: float = 1.0):
        if order < 1:
            raise ValueError(f"n-gram order must be >= 1, got {order}")
        if alpha <= 0:
            raise ValueError(f"smoothing constant must be > 0, got {alpha}")
        if vocab_size < 1:
            raise ValueError(f"vocab size must be >= 1, got {vocab_size}")
        self.current = _NGramState(order, alpha, vocab_size)
        self.initial = self.current.copy()

    @property
    def feature_dim(self) -> int:
        return FEATURE_DIM

    @property
    def order(self) -> int:
        return self.current.order

    @property
    def vocab_size(self) -> int:
        return self.current.vocab_size

    def logprobs(self, payload, mask_from: int = 0) -> list[float]:
        return self.current.logprobs(self._tokens(payload))

    def update(self, batch) -> None:
        for payload in batch:
            self.current.add(self._tokens(payload))

    def features(self, payload, output_mask=None):
        tokens = self._tokens(payload)
        mask = list(output_mask) if output_mask is not None else [True] * len(tokens)
        return _state_features(self.initial, tokens, mask), _state_features(self.current, tokens, mask)

    def snapshot(self) -> None:
        self.initial = self.current.copy()

    @staticmethod
    def _tokens(payload) -> Sequence[int]:
        if isinstance(payload, str):
            raise ProbeError("NGramProbe takes corpus token ids, not text")
        return payload
