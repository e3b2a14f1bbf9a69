"""Harvesting labelled activation windows from the frozen LM."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from npi.control import ControlConfig, collect_sequence
from npi.datagen.dataset import DataExample, Dataset
from npi.datagen.metrics import TargetMetric
from npi.lm.model import TransformerLM
from npi.lm.sampling import SamplerConfig, generate_batch
from npi.lm.vocab import Vocabulary


class HarvestError(ValueError):
    pass


class PartialDatasetWarning(UserWarning):
    pass


def ordered_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """map() over a thread pool when jobs > 1; results keep input order."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def token_offsets(vocab: Vocabulary, ids) -> tuple[str, np.ndarray]:
    """Detokenized text and the exclusive end offset of each token in it."""
    pieces = [vocab.detokenize([t]) for t in ids]
    return "".join(pieces), np.cumsum([len(p) for p in pieces], dtype=np.int64)


def window_start(fire_pass: int | None, w: int, n_passes: int) -> int:
    """Window centred on the firing pass, clamped to the run; run start if it never fired."""
    if fire_pass is None:
        return 0
    return int(min(max(fire_pass - w // 2, 0), n_passes - w))


def harvest_batch(
    model: TransformerLM,
    vocab: Vocabulary,
    contexts,
    metric: TargetMetric,
    config: ControlConfig,
    sampler: SamplerConfig = SamplerConfig(),
    max_iterations: int | None = None,
) -> list[DataExample]:
    """One example per row of an equal-length [B, L] context batch."""
    ctx = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    if ctx.shape[1] < 1:
        raise HarvestError("context must hold at least one token")
    config.check_model(model)
    w = config.window
    n_passes = max_iterations or 4 * w
    if n_passes < w:
        raise HarvestError(f"max_iterations {n_passes} is shorter than the window {w}")
    gen, hidden = generate_batch(model, ctx, n_passes, sampler, taps=config.taps)
    out = []
    for b in range(ctx.shape[0]):
        text, ends = token_offsets(vocab, gen[b])
        k = metric.first_fire(text)
        fire = None if k is None else int(np.searchsorted(ends, k, side="right"))
        start = window_start(fire, w, n_passes)
        S = collect_sequence([[h[b : b + 1] for h in hidden[x]] for x in range(start, start + w)], config)[0]
        lab = metric(vocab.detokenize(gen[b, start : start + w]))
        t_in = np.concatenate([ctx[b], gen[b, :start]])[-config.c_max :]
        out.append(DataExample(S.astype(np.float32), lab, t_in))
    return out


def harvest_example(model, vocab, context, metric, config, sampler=SamplerConfig(), max_iterations=None) -> DataExample:
    context = np.asarray(context, dtype=np.int64)
    if context.ndim != 1 or len(context) < 1:
        raise HarvestError("context must hold at least one token")
    return harvest_batch(model, vocab, context[None, :], metric, config, sampler, max_iterations)[0]


class BalanceFilter:
    """Accepts an example only if the class gap stays within max(tol * total, 1)."""

    def __init__(self, tolerance: float = 0.05):
        if not 0.0 < tolerance <= 0.5:
            raise ValueError("tolerance must lie in (0, 0.5]")
        self.tolerance = tolerance
        self.counts = [0, 0]

    def accept(self, label: int) -> bool:
        c = list(self.counts)
        c[label] += 1
        if abs(c[1] - c[0]) > max(self.tolerance * (c[0] + c[1]), 1.0):
            return False
        self.counts = c
        return True

    @property
    def total(self) -> int:
        return sum(self.counts)


def balance_filter(stream: Iterable, tolerance: float = 0.05, key=lambda e: e.label) -> Iterator:
    f = BalanceFilter(tolerance)
    for item in stream:
        if f.accept(int(key(item))):
            yield item


def word_boundaries(text: str) -> list[int]:
    """Insertion points between words: before every space and at the end."""
    return [i for i, ch in enumerate(text) if ch == " "] + [len(text)]


def inject_rare_tokens(context: str, target: str, rate: float, rng: np.random.Generator) -> str:
    """With probability ``rate`` insert ``target`` (e.g. " cat") at a uniform word boundary."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    if rng.random() >= rate:
        return context
    spots = word_boundaries(context)
    i = spots[int(rng.integers(len(spots)))]
    return context[:i] + target + context[i:]


def corpus_contexts(corpus: str, length: int, rng: np.random.Generator | None = None) -> list[str]:
    """Non-overlapping ``length``-char chunks, each starting at a word start, optionally shuffled."""
    out, i = [], 0
    while True:
        j = corpus.find(" ", i)
        if j < 0 or j + 1 + length > len(corpus):
            break
        out.append(corpus[j + 1 : j + 1 + length])
        i = j + 1 + length
    if rng is not None:
        out = [out[k] for k in rng.permutation(len(out))]
    return out


def build_dataset(
    model: TransformerLM,
    vocab: Vocabulary,
    corpus: str,
    metric: TargetMetric,
    config: ControlConfig,
    n_target: int,
    *,
    sampler: SamplerConfig = SamplerConfig(),
    seed: int = 0,
    inject_rate: float = 0.5,
    tolerance: float = 0.05,
    context_len: int | None = None,
    batch_size: int = 64,
    max_iterations: int | None = None,
    max_contexts: int | None = None,
    corpus_id: str = "",
    jobs: int = 1,
) -> Dataset:
    """Harvest, balance and collect ``n_target`` examples from corpus contexts.

    Contexts are ``context_len`` chars (default c_max); after injection the
    last ``context_len`` chars are kept so every batch is rectangular.
    Falls short with ``partial=True`` and a warning when the corpus runs out.
    ``jobs`` > 1 harvests that many batches concurrently; the balance filter
    still sees them in corpus order, so the result does not depend on it.
    """
    model.verify_frozen()
    config.check_model(model)
    rng = np.random.default_rng(seed)
    length = context_len or config.c_max
    contexts = corpus_contexts(corpus, length, rng)
    if max_contexts is not None:
        contexts = contexts[:max_contexts]
    filt = BalanceFilter(tolerance)
    kept: list[DataExample] = []
    seen = 0

    def prepare(lo: int) -> np.ndarray:
        batch = []
        for text in contexts[lo : lo + batch_size]:
            inj = metric.injection_text(rng)
            if inj is not None:
                text = inject_rare_tokens(text, " " + inj, inject_rate, rng)[-length:]
            batch.append(vocab.encode(text))
        return np.stack(batch)

    def harvest(ids: np.ndarray) -> list[DataExample]:
        return harvest_batch(model, vocab, ids, metric, config, sampler, max_iterations)

    starts = list(range(0, len(contexts), batch_size))
    jobs = max(1, int(jobs))
    for g in range(0, len(starts), jobs):
        if len(kept) >= n_target:
            break
        # injection draws stay serial so any job count sees the same batches
        batches = [prepare(lo) for lo in starts[g : g + jobs]]
        for examples in ordered_map(harvest, batches, jobs):
            for ex in examples:
                seen += 1
                if len(kept) < n_target and filt.accept(ex.label):
                    kept.append(ex)
    partial = len(kept) < n_target
    if partial:
        warnings.warn(f"corpus exhausted: built {len(kept)} of {n_target} examples", PartialDatasetWarning, stacklevel=2)
    ds = Dataset.from_examples(
        kept, metric, config, model.config.d_model, model.frozen_digest, seed, partial=partial, corpus_id=corpus_id
    )
    ds.stats = {"harvested": seen, "kept": len(kept), "label_counts": list(ds.class_counts())}
    model.verify_frozen()
    return ds


def relabel(model: TransformerLM, vocab: Vocabulary, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    """Labels recomputed from greedy regeneration of every stored window (audit helper)."""
    labels = np.empty(len(ds), dtype=np.uint8)
    order = sorted(range(len(ds)), key=lambda j: len(ds.tokens[j]))
    groups: dict[int, list[int]] = {}
    for j in order:
        groups.setdefault(len(ds.tokens[j]), []).append(j)
    for idx in groups.values():
        for lo in range(0, len(idx), batch_size):
            part = idx[lo : lo + batch_size]
            gen, _ = generate_batch(model, np.stack([ds.tokens[j] for j in part]), ds.config.window)
            for j, row in zip(part, gen):
                labels[j] = ds.metric(vocab.detokenize(row))
    return labels


def regenerate_windows(model: TransformerLM, ds: Dataset, idx: Sequence[int]) -> np.ndarray:
    """Greedy activation sequences recomputed from the stored inputs (all inputs must share a length)."""
    gen, hidden = generate_batch(model, np.stack([ds.tokens[j] for j in idx]), ds.config.window, taps=ds.config.taps)
    return collect_sequence(hidden, ds.config)
