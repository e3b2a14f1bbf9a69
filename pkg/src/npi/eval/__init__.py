"""Evaluation: occurrence, embedding shift, word length, perplexity proxy, baselines."""

from npi.eval.embeddings import EmbeddingTable, cosine_distance, embed_sentence, euclidean, fit_embeddings
from npi.eval.harness import (
    CSV_COLUMNS,
    BaselineConfigError,
    EvalReport,
    evaluate,
    npi_generate,
    perplexity_proxy,
    prescreen_contexts,
    word_prob_baseline,
)
from npi.eval.metrics import (
    PairingError,
    UndefinedMetricError,
    embed_shift_metrics,
    fit_length_threshold,
    target_in_output,
    word_length_metrics,
)

__all__ = [
    "CSV_COLUMNS",
    "BaselineConfigError",
    "EmbeddingTable",
    "EvalReport",
    "PairingError",
    "UndefinedMetricError",
    "cosine_distance",
    "embed_shift_metrics",
    "embed_sentence",
    "euclidean",
    "evaluate",
    "fit_embeddings",
    "fit_length_threshold",
    "npi_generate",
    "perplexity_proxy",
    "prescreen_contexts",
    "target_in_output",
    "word_length_metrics",
    "word_prob_baseline",
]
