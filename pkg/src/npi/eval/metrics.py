"""Output-level metrics: target occurrence, embedding shift, word length."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from npi.datagen.metrics import TargetMetric, WordListPresence, WordPresence, words
from npi.eval.embeddings import DISTANCES, EmbeddingTable, embed_sentence


class UndefinedMetricError(ValueError):
    """A metric was requested over an empty set of outputs."""


class PairingError(ValueError):
    pass


def as_metric(target) -> TargetMetric:
    if isinstance(target, TargetMetric):
        return target
    if isinstance(target, str):
        return WordPresence(target)
    return WordListPresence(targets=tuple(target))


def target_hits(outputs: Sequence[str], target) -> np.ndarray:
    metric = as_metric(target)
    return np.array([metric(o) for o in outputs], dtype=np.int64)


def target_in_output(outputs: Sequence[str], target) -> float:
    """Fraction of outputs holding at least one whole-word, case-insensitive match."""
    if len(outputs) == 0:
        raise UndefinedMetricError("target_in_output over zero outputs")
    return float(target_hits(outputs, target).mean())


def target_vector(target, table: EmbeddingTable) -> np.ndarray | None:
    """Mean embedding of the target word(s); None for metrics without target words."""
    if isinstance(target, str):
        return embed_sentence(target, table)
    if isinstance(target, TargetMetric):
        targets = getattr(target, "targets", None)
        return None if targets is None else embed_sentence(" ".join(targets), table)
    return embed_sentence(" ".join(target), table)


def shift_rows(original, controlled, target, table: EmbeddingTable, distance: str = "euclidean"):
    """Per pair: (closer to the target than the original, strictly; distance controlled-to-original).

    The flag is 0 throughout when the target has no words to embed.
    """
    if len(original) != len(controlled):
        raise PairingError(f"{len(original)} originals vs {len(controlled)} controlled outputs")
    dist = DISTANCES[distance]
    tv = target_vector(target, table)
    flags, moves = [], []
    for o, c in zip(original, controlled):
        eo, ec = embed_sentence(o, table), embed_sentence(c, table)
        flags.append(0 if tv is None else int(dist(ec, tv) < dist(eo, tv)))
        moves.append(dist(ec, eo))
    return np.array(flags, dtype=np.int64), np.array(moves, dtype=np.float64)


def embed_shift_metrics(original, controlled, target, table, distance: str = "euclidean") -> tuple[float, float]:
    """(embed_shifts fraction, avg_shift)."""
    if len(original) == 0 and len(controlled) == 0:
        raise UndefinedMetricError("embed shift over zero pairs")
    flags, moves = shift_rows(original, controlled, target, table, distance)
    return float(flags.mean()), float(moves.mean())


def fit_length_threshold(sentences: Sequence[str], n_sigma: float = 2.0) -> float:
    """mean + n_sigma * std (population) of word lengths over the sentences."""
    lengths = np.array([len(w) for s in sentences for w in words(s)], dtype=np.float64)
    if lengths.size == 0:
        raise UndefinedMetricError("no words to fit a length threshold")
    return float(lengths.mean() + n_sigma * lengths.std())


def word_length_row(text: str, threshold: float) -> tuple[float, int]:
    ws = words(text)
    if not ws:
        return 0.0, 0
    lens = [len(w) for w in ws]
    return sum(lens) / len(lens), sum(n > threshold for n in lens)


def word_length_metrics(outputs: Sequence[str], threshold: float) -> tuple[float, float]:
    """(mean over outputs of chars/word, mean over outputs of words longer than threshold)."""
    if len(outputs) == 0:
        raise UndefinedMetricError("word length over zero outputs")
    rows = [word_length_row(o, threshold) for o in outputs]
    return float(np.mean([r[0] for r in rows])), float(np.mean([r[1] for r in rows]))
