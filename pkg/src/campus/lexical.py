"""Type-token ratio and MTLD lexical diversity over token id sequences."""

from __future__ import annotations

from typing import Sequence

DEFAULT_TTR_THRESHOLD = 0.72


def ttr(tokens: Sequence[int]) -> float:
    """Type-token ratio: unique ids / total ids, in (0, 1]."""
    n = len(tokens)
    if n == 0:
        raise ValueError("ttr of an empty token sequence is undefined")
    return len(set(tokens)) / n


def _mtld_pass(tokens: Sequence[int], threshold: float) -> float:
    """One directional MTLD pass: token count / factor count.

    A factor completes whenever the running TTR of the current window drops
    to the threshold or below; the leftover window contributes a partial
    factor of (1 - final TTR) / (1 - threshold). A pass with zero total
    factors (all tokens unique) falls back to the token count.
    """
    factors = 0.0
    window_types: set[int] = set()
    window_len = 0
    running_ttr = 1.0
    for tok in tokens:
        window_types.add(tok)
        window_len += 1
        running_ttr = len(window_types) / window_len
        if running_ttr <= threshold:
            factors += 1.0
            window_types.clear()
            window_len = 0
            running_ttr = 1.0
    if window_len > 0:
        factors += (1.0 - running_ttr) / (1.0 - threshold)
    if factors == 0.0:
        return float(len(tokens))
    return len(tokens) / factors


def mtld(tokens: Sequence[int], threshold: float = DEFAULT_TTR_THRESHOLD) -> float:
    """Bidirectional MTLD: mean of a forward and a reverse factor pass."""
    if len(tokens) == 0:
        raise ValueError("mtld of an empty token sequence is undefined")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"mtld threshold must be in (0, 1), got {threshold}")
    tokens = list(tokens)
    return 0.5 * (_mtld_pass(tokens, threshold) + _mtld_pass(tokens[::-1], threshold))
