"""Dataset curation: metrics, harvesting, balancing, injection, NPIQ files."""

from npi.datagen.dataset import (
    DataExample,
    Dataset,
    DatasetFormatError,
    decode_dataset,
    encode_dataset,
    expected_size,
    load_dataset,
    save_dataset,
)
from npi.datagen.harvest import (
    BalanceFilter,
    HarvestError,
    PartialDatasetWarning,
    balance_filter,
    build_dataset,
    corpus_contexts,
    harvest_batch,
    harvest_example,
    inject_rare_tokens,
    relabel,
)
from npi.datagen.metrics import (
    AvgWordLength,
    MetricError,
    TargetMetric,
    WordListPresence,
    WordPresence,
    label,
    parse_metric,
    words,
)

__all__ = [
    "AvgWordLength",
    "BalanceFilter",
    "DataExample",
    "Dataset",
    "DatasetFormatError",
    "HarvestError",
    "MetricError",
    "PartialDatasetWarning",
    "TargetMetric",
    "WordListPresence",
    "WordPresence",
    "balance_filter",
    "build_dataset",
    "corpus_contexts",
    "decode_dataset",
    "encode_dataset",
    "expected_size",
    "harvest_batch",
    "harvest_example",
    "inject_rare_tokens",
    "label",
    "load_dataset",
    "parse_metric",
    "relabel",
    "save_dataset",
    "words",
]
