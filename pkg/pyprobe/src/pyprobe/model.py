"""Byte-level causal language model used as the reference probe model.

Any torch causal LM can sit behind the server as long as it implements the
CausalLM interface below; the built-in `tiny` model keeps the adapter fully
self-contained (no downloads, CPU-friendly, seeded).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

BOS = 256
VOCAB = 257  # 256 byte values + BOS


@dataclass
class ModelConfig:
    embed: int = 32
    hidden: int = 64
    lr: float = 0.1
    seed: int = 0
    max_len: int = 512
    device: str = "cpu"


class ByteLM(nn.Module):
    """Embedding -> GRU -> logits over the byte vocabulary."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.embed = nn.Embedding(VOCAB, cfg.embed)
        self.rnn = nn.GRU(cfg.embed, cfg.hidden, batch_first=True)
        self.head = nn.Linear(cfg.hidden, VOCAB)
        self.to(cfg.device)

    def encode_text(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))[: self.cfg.max_len]

    def clip_tokens(self, tokens: list[int]) -> list[int]:
        return [t if 0 <= t < VOCAB else 0 for t in tokens][: self.cfg.max_len]

    def hidden_states(self, ids: list[int]) -> torch.Tensor:
        """(len+1, hidden) states over BOS followed by the ids."""
        x = torch.tensor([[BOS] + ids], dtype=torch.long, device=self.cfg.device)
        out, _ = self.rnn(self.embed(x))
        return out[0]

    def token_logprobs(self, ids: list[int]) -> list[float]:
        if not ids:
            return []
        with torch.no_grad():
            states = self.hidden_states(ids[:-1] if len(ids) > 1 else [])
            logits = self.head(states)
            logprobs = F.log_softmax(logits, dim=-1)
            targets = torch.tensor(ids, dtype=torch.long, device=self.cfg.device)
            return logprobs[torch.arange(len(ids)), targets].tolist()

    def mean_hidden(self, ids: list[int]) -> list[float]:
        if not ids:
            return [0.0] * self.cfg.hidden
        with torch.no_grad():
            states = self.hidden_states(ids)
            return states[1:].mean(dim=0).tolist()  # skip the BOS state

    def nll(self, ids: list[int]) -> torch.Tensor:
        states = self.hidden_states(ids[:-1] if len(ids) > 1 else [])
        logits = self.head(states)
        targets = torch.tensor(ids, dtype=torch.long, device=self.cfg.device)
        return F.cross_entropy(logits, targets, reduction="mean")


class ProbeModel:
    """Live model plus the frozen snapshot backing z1."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.live = ByteLM(cfg)
        self.optimizer = torch.optim.SGD(self.live.parameters(), lr=cfg.lr)
        self.frozen = copy.deepcopy(self.live)
        self.frozen.eval()

    def snapshot(self) -> None:
        self.frozen = copy.deepcopy(self.live)
        self.frozen.eval()

    def sft_step(self, batches: list[list[int]]) -> float:
        """One gradient step on the mean NLL over the batch."""
        samples = [ids for ids in batches if ids]
        if not samples:
            return 0.0
        self.optimizer.zero_grad()
        loss = torch.stack([self.live.nll(ids) for ids in samples]).mean()
        loss.backward()
        self.optimizer.step()
        return float(loss.detach())


def logprob_stats(logprobs: list[float]) -> list[float]:
    """8-dim summary used by the `stats` pooling mode."""
    import math

    if not logprobs:
        return [0.0] * 8
    n = len(logprobs)
    mean = sum(logprobs) / n
    var = sum((v - mean) ** 2 for v in logprobs) / n
    ordered = sorted(logprobs)
    return [
        mean,
        math.sqrt(var),
        ordered[0],
        ordered[-1],
        ordered[n // 2],
        math.log1p(n),
        sum(math.exp(v) for v in logprobs) / n,
        logprobs[-1],
    ]
