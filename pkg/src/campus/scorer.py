"""Competence-aware scoring model R and its adversarial discriminator D.

Both are 2-layer perceptrons (2*feature_dim -> 256 -> 1, relu then logistic)
trained with plain SGD and exact hand-written backprop, so every gradient is
finite-difference checkable. Pair labels come from the portion protocol:
samples the probe just trained on are "easy" (0), the next unseen portion is
"hard" (1).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .corpus import EncodedCorpus


class ScorerError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScorerConfig:
    n_portions: int = 5
    lr: float = 1e-5
    batch: int = 4
    inner_iters: int = 2
    label_smoothing: float = 0.1
    upsample: bool = True
    adv_weight: float = 0.1
    hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.n_portions < 2:
            raise ScorerError(f"n_portions must be >= 2, got {self.n_portions}")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ScorerError(f"label smoothing must be in [0, 0.5), got {self.label_smoothing}")
        if min(self.lr, self.batch, self.inner_iters, self.hidden) <= 0:
            raise ScorerError("lr, batch, inner_iters and hidden must be positive")


@dataclass
class LabeledFeature:
    z: np.ndarray  # concat(z1, z2)
    label: int  # 0 easy (trained portion), 1 hard (next portion)
    portion: int  # pairing round the feature came from


@dataclass
class LossRecord:
    round: int
    inner_iter: int
    model: str  # "D" or "R"
    loss: float


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bce_from_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    # softplus-based form, safe for large |logit|
    loss = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return float(np.mean(loss))


class Mlp:
    """2-layer perceptron with logistic output; parameters are float64."""

    def __init__(self, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: float):
        self.w1 = np.asarray(w1, dtype=np.float64)  # (hidden, in_dim)
        self.b1 = np.asarray(b1, dtype=np.float64)  # (hidden,)
        self.w2 = np.asarray(w2, dtype=np.float64)  # (hidden,)
        self.b2 = float(b2)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator) -> "Mlp":
        # Kaiming-style: N(0, sqrt(2/fan_in)) weights, zero biases
        w1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(hidden, in_dim))
        w2 = rng.normal(0.0, np.sqrt(2.0 / hidden), size=hidden)
        return cls(w1, np.zeros(hidden), w2, 0.0)

    @classmethod
    def zeros(cls, in_dim: int, hidden: int) -> "Mlp":
        return cls(np.zeros((hidden, in_dim)), np.zeros(hidden), np.zeros(hidden), 0.0)

    def copy(self) -> "Mlp":
        return Mlp(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2)

    def logits(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.in_dim:
            raise ScorerError(f"feature dim {z.shape[1]} does not match scorer input dim {self.in_dim}")
        h = np.maximum(z @ self.w1.T + self.b1, 0.0)
        return h @ self.w2 + self.b2

    def forward(self, z: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(z))

    def forward_one(self, z: Sequence[float]) -> float:
        return float(self.forward(np.asarray(z, dtype=np.float64))[0])

    def bce_loss(self, z: np.ndarray, targets: np.ndarray) -> float:
        return _bce_from_logits(self.logits(z), np.asarray(targets, dtype=np.float64))

    def bce_grads(self, z: np.ndarray, targets: np.ndarray):
        """Mean BCE over the batch and its exact gradients."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        targets = np.asarray(targets, dtype=np.float64)
        pre = z @ self.w1.T + self.b1
        h = np.maximum(pre, 0.0)
        logits = h @ self.w2 + self.b2
        loss = _bce_from_logits(logits, targets)
        dlogit = (_sigmoid(logits) - targets) / z.shape[0]
        dw2 = h.T @ dlogit
        db2 = float(np.sum(dlogit))
        dh = np.outer(dlogit, self.w2)
        dh[pre <= 0.0] = 0.0
        dw1 = dh.T @ z
        db1 = dh.sum(axis=0)
        return loss, (dw1, db1, dw2, db2)

    def sgd_step(self, grads, lr: float) -> None:
        dw1, db1, dw2, db2 = grads
        self.w1 -= lr * dw1
        self.b1 -= lr * db1
        self.w2 -= lr * dw2
        self.b2 -= lr * db2


def smoothed_targets(labels: np.ndarray, eps: float) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    return labels * (1.0 - eps) + (1.0 - labels) * eps


def train_step_R(R: Mlp, D: Mlp, batch: Sequence[LabeledFeature], config: ScorerConfig):
    """One SGD step on R: BCE against smoothed labels plus the adversarial term.

    The adversarial term scores D on flipped labels over the same features; it
    shapes the reported loss (D holds the true-label objective, Eq.-style),
    while R's parameter gradient comes from its own BCE term.
    """
    z = np.stack([p.z for p in batch])
    labels = np.array([p.label for p in batch], dtype=np.float64)
    targets = smoothed_targets(labels, config.label_smoothing)
    bce, grads = R.bce_grads(z, targets)
    adv = _bce_from_logits(D.logits(z), 1.0 - labels) if config.adv_weight else 0.0
    total = bce + config.adv_weight * adv
    if not np.isfinite(total):
        raise ScorerError(f"non-finite R loss {total}")
    R.sgd_step(grads, config.lr)
    return R, {"bce": bce, "adv": adv, "total": total}


def train_step_D(D: Mlp, batch: Sequence[LabeledFeature], config: ScorerConfig):
    """One SGD step on D: plain BCE against the true easy/hard labels."""
    z = np.stack([p.z for p in batch])
    labels = np.array([p.label for p in batch], dtype=np.float64)
    loss, grads = D.bce_grads(z, labels)
    if not np.isfinite(loss):
        raise ScorerError(f"non-finite D loss {loss}")
    D.sgd_step(grads, config.lr)
    return D, loss


def split_portions(ids: Sequence[int], config: ScorerConfig) -> list[list[int]]:
    """Seeded shuffle, then n equal portions with the remainder in the last."""
    if len(ids) < 2 * config.n_portions:
        raise ScorerError(f"need at least {2 * config.n_portions} samples for {config.n_portions} portions")
    rng = np.random.default_rng(config.seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    base = len(perm) // config.n_portions
    if base == 0:
        raise ScorerError("portion would be empty")
    portions = [perm[k * base : (k + 1) * base] for k in range(config.n_portions - 1)]
    portions.append(perm[(config.n_portions - 1) * base :])
    return portions


def _features_of(corpus: EncodedCorpus, probe, sid: int) -> np.ndarray:
    enc = corpus.by_id[sid]
    z1, z2 = probe.features(probe.payload_of(enc), enc.output_mask)
    return np.asarray(list(z1) + list(z2), dtype=np.float64)


def pair_rounds(corpus: EncodedCorpus, probe, config: ScorerConfig) -> Iterator[list[LabeledFeature]]:
    """Yield one pair list per round i: train probe on portion i, then label
    portion i as 0 and portion i+1 as 1 under the updated state."""
    portions = split_portions(sorted(corpus.by_id), config)
    for i in range(config.n_portions - 1):
        probe.update([probe.payload_of(corpus.by_id[sid]) for sid in portions[i]])
        pairs = [LabeledFeature(_features_of(corpus, probe, sid), 0, i + 1) for sid in portions[i]]
        pairs += [LabeledFeature(_features_of(corpus, probe, sid), 1, i + 1) for sid in portions[i + 1]]
        yield pairs


def build_training_pairs(corpus: EncodedCorpus, probe, config: ScorerConfig) -> list[LabeledFeature]:
    out: list[LabeledFeature] = []
    for pairs in pair_rounds(corpus, probe, config):
        out.extend(pairs)
    return out


def upsample_pairs(pairs: list[LabeledFeature], rng: np.random.Generator) -> list[LabeledFeature]:
    """Resample the minority label (with replacement) to a 1:1 balance."""
    zeros = [p for p in pairs if p.label == 0]
    ones = [p for p in pairs if p.label == 1]
    minority, majority = (zeros, ones) if len(zeros) < len(ones) else (ones, zeros)
    if not minority or len(minority) == len(majority):
        return list(pairs)
    extra = [minority[int(k)] for k in rng.integers(len(minority), size=len(majority) - len(minority))]
    return list(pairs) + extra


def _minibatches(pairs: list[LabeledFeature], batch: int, rng: np.random.Generator):
    order = rng.permutation(len(pairs))
    for k in range(0, len(order), batch):
        yield [pairs[int(i)] for i in order[k : k + batch]]


@dataclass
class TrainedScorer:
    R: Mlp
    D: Mlp = field(repr=False)
    history: list[LossRecord] = field(repr=False, default_factory=list)

    def forward_one(self, z: Sequence[float]) -> float:
        return self.R.forward_one(z)


def train_on_rounds(rounds, feature_dim: int, config: ScorerConfig) -> TrainedScorer:
    """Adversarial training loop over an iterable of per-round pair lists.

    Per round: optional minority upsampling, then `inner_iters` alternating
    epochs of D-steps and R-steps over shuffled minibatches.
    """
    rng = np.random.default_rng(config.seed)
    in_dim = 2 * feature_dim
    R = Mlp.init(in_dim, config.hidden, rng)
    D = Mlp.init(in_dim, config.hidden, rng)
    history: list[LossRecord] = []
    for round_no, pairs in enumerate(rounds, start=1):
        if config.upsample:
            pairs = upsample_pairs(pairs, rng)
        for it in range(1, config.inner_iters + 1):
            d_losses = [train_step_D(D, mb, config)[1] for mb in _minibatches(pairs, config.batch, rng)]
            history.append(LossRecord(round_no, it, "D", float(np.mean(d_losses))))
            r_losses = [train_step_R(R, D, mb, config)[1]["total"] for mb in _minibatches(pairs, config.batch, rng)]
            history.append(LossRecord(round_no, it, "R", float(np.mean(r_losses))))
    return TrainedScorer(R=R, D=D, history=history)


def train_scorer(corpus: EncodedCorpus, probe, config: ScorerConfig) -> TrainedScorer:
    """Full pair-building plus adversarial training.

    Mutates the probe (portion updates); callers wanting a pristine probe pass
    a scratch one.
    """
    return train_on_rounds(pair_rounds(corpus, probe, config), probe.feature_dim, config)


def accuracy(model: Mlp, pairs: Sequence[LabeledFeature]) -> float:
    z = np.stack([p.z for p in pairs])
    labels = np.array([p.label for p in pairs])
    return float(np.mean((model.forward(z) >= 0.5) == (labels == 1)))


def save_scorer(path: str, R: Mlp, config: ScorerConfig) -> None:
    payload = {
        "in_dim": R.in_dim,
        "hidden": R.hidden,
        "w1": R.w1.tolist(),
        "b1": R.b1.tolist(),
        "w2": R.w2.tolist(),
        "b2": R.b2,
        "config": asdict(config),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_scorer(path: str) -> tuple[Mlp, dict]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    mlp = Mlp(
        np.array(payload["w1"], dtype=np.float64),
        np.array(payload["b1"], dtype=np.float64),
        np.array(payload["w2"], dtype=np.float64),
        payload["b2"],
    )
    if mlp.w1.shape != (payload["hidden"], payload["in_dim"]):
        raise ScorerError(f"checkpoint shape mismatch in {path}")
    return mlp, payload.get("config", {})
