"""Word vectors from a factorized log co-occurrence matrix, and bag-of-words sentence vectors."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from npi.autodiff.kernels import cooccurrence
from npi.datagen.metrics import words

_SENTENCE_END = re.compile(r"[.!?]+")


@dataclass
class EmbeddingTable:
    words: list[str]
    vectors: np.ndarray  # [V, dim] float64
    normalized: bool = False

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.shape[0] != len(self.words):
            raise ValueError("one vector per word required")
        self.index = {w: i for i, w in enumerate(self.words)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def vector(self, word: str) -> np.ndarray:
        return self.vectors[self.index[word.lower()]]

    def save(self, path) -> None:
        lines = [f"{len(self.words)} {self.dim} {int(self.normalized)}"]
        lines += [w + " " + " ".join(repr(float(v)) for v in vec) for w, vec in zip(self.words, self.vectors)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        head, *rows = Path(path).read_text(encoding="utf-8").splitlines()
        n, dim, norm = (int(x) for x in head.split())
        ws, vecs = [], np.zeros((n, dim))
        for i, row in enumerate(rows[:n]):
            w, *vals = row.split(" ")
            ws.append(w)
            vecs[i] = [float(v) for v in vals]
        return cls(ws, vecs, bool(norm))


def fit_embeddings(corpus: str, dim: int = 32, window: int = 4, normalize: bool = False) -> EmbeddingTable:
    """Truncated SVD of log(1 + X), X the 1/distance-weighted in-sentence co-occurrence counts.

    Vectors are U_k * sqrt(s_k); each column's sign is fixed so its largest-magnitude
    entry is positive. Dimensions beyond the vocabulary size are zero.
    """
    sents = [words(s) for s in _SENTENCE_END.split(corpus)]
    vocab = sorted({w for s in sents for w in s})
    index = {w: i for i, w in enumerate(vocab)}
    ids = np.array([index[w] for s in sents for w in s], dtype=np.int64)
    sent_ids = np.repeat(np.arange(len(sents)), [len(s) for s in sents])
    counts = cooccurrence(ids, sent_ids, len(vocab), window)
    u, s, _ = np.linalg.svd(np.log1p(counts))
    k = min(dim, len(vocab))
    vecs = np.zeros((len(vocab), dim))
    vecs[:, :k] = u[:, :k] * np.sqrt(s[:k])
    for j in range(k):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] *= -1
    if normalize:
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        vecs = vecs / np.where(norms > 0, norms, 1.0)
    return EmbeddingTable(vocab, vecs, normalize)


def embed_sentence(text: str, table: EmbeddingTable) -> np.ndarray:
    """Mean of the known words' vectors; the zero vector when none are known."""
    rows = [table.index[w] for w in words(text) if w in table.index]
    if not rows:
        return np.zeros(table.dim)
    return table.vectors[rows].mean(axis=0)


def euclidean(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


DISTANCES = {"euclidean": euclidean, "cosine": cosine_distance}
