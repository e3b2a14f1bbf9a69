"""Pretraining, fine-tuning and perplexity for the toy LM."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from npi.autodiff import tensor as T
from npi.autodiff.optim import AdamState, adam_step, clip_grad_norm
from npi.autodiff.tensor import no_grad
from npi.lm.model import LMConfig, TransformerLM
from npi.lm.vocab import Vocabulary

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LMTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    min_lr_frac: float = 0.1
    warmup: int = 50
    clip: float = 1.0
    seed: int = 0


def _lr_at(step: int, cfg: LMTrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * (cfg.min_lr_frac + (1 - cfg.min_lr_frac) * 0.5 * (1 + np.cos(np.pi * frac)))


def _train_steps(model: TransformerLM, ids: np.ndarray, cfg: LMTrainConfig) -> list[float]:
    c_max = model.config.c_max
    span = min(c_max, len(ids) - 1)
    if span < 1:
        raise DataError("corpus must contain at least two tokens")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState(lr=cfg.lr)
    losses = []
    offsets = np.arange(span + 1)
    for step in range(cfg.steps):
        starts = rng.integers(0, len(ids) - span, size=cfg.batch_size)
        chunk = ids[starts[:, None] + offsets]
        logits, _ = model.forward(chunk[:, :-1])
        loss = T.cross_entropy(T.reshape(logits, (-1, logits.shape[-1])), chunk[:, 1:].reshape(-1))
        T.backward(loss)
        clip_grad_norm(params, cfg.clip)
        state.lr = _lr_at(step, cfg)
        adam_step(params, state)
        losses.append(float(loss.data))
        if step % 200 == 0:
            log.info("lm step %d loss %.4f", step, losses[-1])
    return losses


def pretrain(
    corpus: str,
    vocab: Vocabulary,
    config: LMConfig,
    train: LMTrainConfig = LMTrainConfig(),
    init_seed: int = 0,
) -> tuple[TransformerLM, list[float]]:
    """Train a fresh model on next-token prediction; returns the frozen model and loss curve."""
    if not corpus:
        raise DataError("empty corpus")
    ids = vocab.encode(corpus)
    model = TransformerLM(config, seed=init_seed)
    losses = _train_steps(model, ids, train)
    model.freeze()
    return model, losses


def fine_tune(model: TransformerLM, vocab: Vocabulary, target_corpus: str, train: LMTrainConfig) -> tuple[TransformerLM, list[float]]:
    """Train a separate copy on a target corpus; the given model is not touched."""
    if not target_corpus:
        raise DataError("empty corpus")
    tuned = model.trainable_copy()
    losses = _train_steps(tuned, vocab.encode(target_corpus), train)
    tuned.freeze()
    return tuned, losses


def token_nll(model: TransformerLM, ids, start: int = 1) -> np.ndarray:
    """Negative log-likelihood of ids[i] given up to c_max preceding tokens, for i >= start."""
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    start = max(1, start)
    if n <= start:
        return np.zeros(0)
    c_max = model.config.c_max
    out = np.empty(n, dtype=np.float64)
    with no_grad():
        head = ids[: min(n - 1, c_max)]
        logits, _ = model.forward(head[None, :])
        lp = _log_softmax(logits.data[0])
        k = len(head)
        out[1 : k + 1] = -lp[np.arange(k), ids[1 : k + 1]]
        rest = np.arange(max(k + 1, start), n)
        for chunk in np.array_split(rest, max(1, len(rest) // 64)) if len(rest) else []:
            windows = np.stack([ids[i - c_max : i] for i in chunk])
            logits, _ = model.forward(windows)
            lp = _log_softmax(logits.data[:, -1])
            out[chunk] = -lp[np.arange(len(chunk)), ids[chunk]]
    return out[start:]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def perplexity(model: TransformerLM, vocab: Vocabulary, text: str, prefix: str = "") -> float:
    """exp(mean next-token NLL) of ``text``; with a prefix, only text tokens are scored."""
    ids = vocab.tokenize(prefix + text)
    start = max(1, len(prefix))
    if len(ids) - start < 1 or len(ids) < 2:
        raise DataError("perplexity needs at least two tokens")
    return float(np.exp(token_nll(model, ids, start).mean()))
