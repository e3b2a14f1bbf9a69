import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npi.datagen import (
    AvgWordLength,
    BalanceFilter,
    Dataset,
    DatasetFormatError,
    HarvestError,
    MetricError,
    PartialDatasetWarning,
    WordListPresence,
    WordPresence,
    balance_filter,
    build_dataset,
    corpus_contexts,
    decode_dataset,
    encode_dataset,
    expected_size,
    harvest_example,
    inject_rare_tokens,
    load_dataset,
    relabel,
    save_dataset,
)
from npi.datagen.harvest import ordered_map, regenerate_windows, window_start
from npi.datagen.metrics import decode_metric, parse_metric, words
from npi.lm.sampling import generate_batch

from conftest import CFG


@pytest.mark.parametrize(
    "text,hit",
    [("the cat sat", 1), ("concatenate", 0), ("Cat.", 1), ("cats", 0), ("a cat's toy", 0), ("", 0), ("bobcat cat", 1)],
)
def test_word_presence(text, hit):
    assert WordPresence("cat")(text) == hit


def test_polarity_and_lists():
    assert WordPresence("cat", polarity=False)("no felines") == 1
    m = WordListPresence(targets=("cat", "dog"))
    assert m("a dog ran") == 1 and m("a hen ran") == 0
    with pytest.raises(MetricError):
        WordPresence("c@t")
    with pytest.raises(MetricError):
        WordListPresence(targets=())


def test_avg_word_length():
    m = AvgWordLength(threshold=3.0)
    assert m("elephant giraffe") == 1 and m("a an the") == 0 and m("...") == 0


def test_first_fire_is_the_completing_char():
    m = WordPresence("cat")
    text = "the cat sat"
    k = m.first_fire(text)
    assert k == 6 and m(text[: k + 1]) == 1 and m(text[:k]) == 0
    # the negated metric holds from the first char until the word completes
    assert WordPresence("cat", polarity=False).first_fire("cat") == 0
    assert m.first_fire("the dog") is None


@pytest.mark.parametrize("spec", ["word:cat", "!word:cat", "words:cat,dog", "avglen:5.5", "!avglen:4"])
def test_metric_spec_and_blob_round_trip(spec):
    m = parse_metric(spec)
    assert decode_metric(m.tag, m.encode()) == m
    with pytest.raises(MetricError):
        parse_metric("bogus:1")


def test_words_split_on_punctuation():
    assert words("The cat.Dog, it's") == ["the", "cat", "dog", "it's"]


def test_balance_filter_bound():
    f = BalanceFilter(0.05)
    kept = [lab for lab in [1] * 10 + [0, 1] * 30 if f.accept(lab)]
    ones = sum(kept)
    assert abs(ones - (len(kept) - ones)) <= max(0.05 * len(kept), 1)
    assert list(balance_filter([1, 1, 1, 0, 0, 0], 0.05, key=lambda x: x)) == [1, 0, 0]
    with pytest.raises(ValueError):
        BalanceFilter(0.0)


@given(st.lists(st.integers(0, 1), max_size=300), st.floats(0.01, 0.5))
@settings(max_examples=60, deadline=None)
def test_balance_filter_invariant(labels, tol):
    f = BalanceFilter(tol)
    for lab in labels:
        f.accept(lab)
        a, b = f.counts
        assert abs(a - b) <= max(tol * (a + b), 1)


def test_inject_rare_tokens(rng):
    assert inject_rare_tokens("the dog ran", " cat", 0.0, rng) == "the dog ran"
    out = inject_rare_tokens("the dog ran", " cat", 1.0, rng)
    assert out.replace(" cat", "", 1) == "the dog ran" and WordPresence("cat")(out)
    with pytest.raises(ValueError):
        inject_rare_tokens("x", " cat", 1.5, rng)
    hits = sum(inject_rare_tokens("a b", " cat", 0.3, np.random.default_rng(s)) != "a b" for s in range(2000))
    assert abs(hits / 2000 - 0.3) < 0.04


def test_corpus_contexts():
    text = "the dog saw the hen. the jay ran to the barn. " * 3
    ctx = corpus_contexts(text, 10)
    assert all(len(c) == 10 for c in ctx)
    assert all(c in text for c in ctx)
    shuffled = corpus_contexts(text, 10, np.random.default_rng(0))
    assert sorted(shuffled) == sorted(ctx)


def test_window_start():
    assert window_start(None, 4, 16) == 0
    assert window_start(1, 4, 16) == 0
    assert window_start(8, 4, 16) == 6
    assert window_start(15, 4, 16) == 12


def test_harvest_example_matches_generation(trained_lm, vocab):
    metric = WordPresence("dog")
    ctx = vocab.encode("the hen saw the ")
    ex = harvest_example(trained_lm, vocab, ctx, metric, CFG)
    assert ex.S.shape == CFG.sequence_shape(16) and ex.S.dtype == np.float32
    # re-derive the stored window from its stored input
    toks, hidden = generate_batch(trained_lm, ex.tokens[None], CFG.window, taps=CFG.taps)
    assert metric(vocab.detokenize(toks[0])) == ex.label
    from npi.control import collect_sequence

    assert np.allclose(collect_sequence(hidden, CFG)[0], ex.S, atol=1e-6)
    with pytest.raises(HarvestError):
        harvest_example(trained_lm, vocab, ctx[:0], metric, CFG)
    with pytest.raises(HarvestError):
        harvest_example(trained_lm, vocab, ctx, metric, CFG, max_iterations=2)


def test_build_dataset_balance_and_labels(small_ds, trained_lm, vocab):
    ds = small_ds
    assert len(ds) == 60 and not ds.partial
    zeros, ones = ds.class_counts()
    assert 0.45 <= ones / len(ds) <= 0.55
    assert np.array_equal(relabel(trained_lm, vocab, ds), ds.labels)
    assert ds.lm_digest == trained_lm.frozen_digest
    same = [j for j in range(len(ds)) if len(ds.tokens[j]) == len(ds.tokens[0])][:5]
    assert np.allclose(regenerate_windows(trained_lm, ds, same), ds.S[same], atol=1e-6)


def test_build_dataset_reproducible_and_jobs_invariant(small_ds, trained_lm, vocab, corpus):
    again = build_dataset(trained_lm, vocab, corpus, WordPresence("dog"), CFG, 60, seed=5, batch_size=32, jobs=3)
    assert encode_dataset(again) == encode_dataset(small_ds)


def test_partial_dataset_warns(trained_lm, vocab, corpus):
    with pytest.warns(PartialDatasetWarning):
        ds = build_dataset(trained_lm, vocab, corpus, WordPresence("dog"), CFG, 500, seed=1, max_contexts=40)
    assert ds.partial and len(ds) <= 40


def test_empty_dataset(trained_lm, vocab, corpus):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ds = build_dataset(trained_lm, vocab, corpus, WordPresence("dog"), CFG, 0)
    assert len(ds) == 0
    assert decode_dataset(encode_dataset(ds)).S.shape == (0, *CFG.sequence_shape(16))


def test_serialization_round_trip(small_ds, tmp_path):
    p = tmp_path / "d.npiq"
    save_dataset(small_ds, p)
    raw = p.read_bytes()
    assert len(raw) == expected_size(small_ds)
    back = load_dataset(p)
    assert encode_dataset(back) == raw
    assert np.array_equal(back.S, small_ds.S) and np.array_equal(back.labels, small_ds.labels)
    assert all(np.array_equal(a, b) for a, b in zip(back.tokens, small_ds.tokens))
    assert back.metric == small_ds.metric and back.config.taps == CFG.taps


def test_header_layout(small_ds):
    raw = encode_dataset(small_ds)
    assert raw[:4] == b"NPIQ"
    assert struct.unpack_from("<II", raw, 4) == (1, 60)
    assert struct.unpack_from("<4H", raw, 12) == (4, 2, 16, 16)
    assert struct.unpack_from("<2H", raw, 20) == (1, 2)


def test_format_errors(small_ds):
    raw = encode_dataset(small_ds)
    with pytest.raises(DatasetFormatError):
        decode_dataset(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError):
        decode_dataset(raw[:-3])
    with pytest.raises(DatasetFormatError):
        decode_dataset(raw + b"\0")
    with pytest.raises(DatasetFormatError):
        decode_dataset(raw[:4] + struct.pack("<I", 9) + raw[8:])


def test_subset(small_ds):
    sub = small_ds.subset([0, 2])
    assert len(sub) == 2 and np.array_equal(sub.S[1], small_ds.S[2])


def test_ordered_map_keeps_order():
    assert ordered_map(lambda x: x * x, list(range(20)), jobs=4) == [x * x for x in range(20)]

