from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from npi.autodiff.tensor import no_grad
from npi.lm.model import TransformerLM


@dataclass(frozen=True)
class SamplerConfig:
    top_k: int = 1
    top_p: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.top_p is not None and not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")

    @property
    def greedy(self) -> bool:
        return self.top_k == 1


def select_tokens(logits: np.ndarray, sampler: SamplerConfig, rng: np.random.Generator | None) -> np.ndarray:
    """Pick one id per row of a [B, V] logit array.

    top_k=1 is argmax with the lowest id winning ties.
    """
    if sampler.top_k == 1:
        return np.argmax(logits, axis=-1)
    out = np.empty(logits.shape[0], dtype=np.int64)
    for r, row in enumerate(logits.astype(np.float64)):
        order = np.argsort(-row, kind="stable")[: sampler.top_k]
        z = row[order] - row[order[0]]
        p = np.exp(z)
        p /= p.sum()
        if sampler.top_p is not None:
            keep = np.searchsorted(np.cumsum(p), sampler.top_p) + 1
            p = p[:keep] / p[:keep].sum()
            order = order[:keep]
        out[r] = order[rng.choice(len(order), p=p)]
    return out


def generate_batch(
    model: TransformerLM,
    contexts,
    steps: int,
    sampler: SamplerConfig = SamplerConfig(),
    taps: Sequence[int] | None = None,
):
    """Autoregressive decoding for a [B, L] batch of equal-length contexts.

    Each pass sees the last c_max tokens. Returns (tokens [B, steps], hidden)
    where hidden[x] is the list of per-block [B, len_x, d] arrays at pass x
    (only the blocks in ``taps`` when given, in that order).
    """
    seq = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    if seq.shape[1] < 1:
        raise ValueError("context must hold at least one token")
    rng = np.random.default_rng(sampler.seed) if sampler.top_k > 1 else None
    c_max = model.config.c_max
    out = np.zeros((seq.shape[0], max(steps, 0)), dtype=np.int64)
    hidden = []
    with no_grad():
        for x in range(steps):
            window = seq[:, -c_max:]
            logits, hs = model.forward(window)
            nxt = select_tokens(logits.data[:, -1], sampler, rng)
            out[:, x] = nxt
            if taps is None:
                hidden.append([h.data for h in hs])
            else:
                hidden.append([hs[j - 1].data for j in taps])
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out, hidden


def generate(model: TransformerLM, context, steps: int, sampler: SamplerConfig = SamplerConfig()):
    """Single-context decoding; returns (ids [steps], per-step list of n [len x d] arrays)."""
    context = np.asarray(context, dtype=np.int64)
    toks, hidden = generate_batch(model, context[None, :], steps, sampler)
    return toks[0], [[h[0] for h in hs] for hs in hidden]
