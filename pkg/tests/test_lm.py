import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npi.autodiff import tensor as T
from npi.lm import (
    ContextError,
    DataError,
    FrozenModelError,
    LMConfig,
    LMTrainConfig,
    SamplerConfig,
    TransformerLM,
    Vocabulary,
    fine_tune,
    generate,
    generate_batch,
    lm_forward,
    load_lm,
    perplexity,
    pretrain,
)
from npi.lm.corpus import generic_sentences, sentences, synthetic_corpus, target_corpus
from npi.lm.vocab import UNK_TEXT

MEMO = "the quick cat saw a dog by the old red barn today."  # 50 characters


def test_vocab_basics(vocab):
    assert vocab.tokenize("") == [] and vocab.detokenize([]) == ""
    assert vocab.tokenize("cat") == [vocab.index["c"], vocab.index["a"], vocab.index["t"]]
    assert sorted(vocab.index.values()) == list(range(len(vocab)))
    assert vocab.detokenize(vocab.tokenize("cat#")) == "cat" + UNK_TEXT


def test_vocab_round_trip_on_corpus_lines(corpus, vocab):
    for line in corpus.split(". ")[:200]:
        assert vocab.detokenize(vocab.tokenize(line)) == line


@given(st.text(alphabet="ab\n\t\\ c", max_size=20))
@settings(max_examples=30, deadline=None)
def test_vocab_file_round_trip(tmp_path_factory, text):
    v = Vocabulary.from_text(text + "x")
    p = tmp_path_factory.mktemp("v") / "vocab.txt"
    v.save(p)
    assert Vocabulary.load(p).tokens == v.tokens


def test_lm_forward_structure_and_determinism(random_lm):
    toks = np.array([3, 5, 7, 2, 9])
    a_logits, a_h = lm_forward(random_lm, toks)
    b_logits, b_h = lm_forward(random_lm, toks)
    assert np.array_equal(a_logits, b_logits)
    assert all(np.array_equal(x, y) for x, y in zip(a_h, b_h))
    assert len(a_h) == random_lm.n_blocks
    assert all(h.shape == (5, random_lm.config.d_model) for h in a_h)
    p = np.exp(a_logits - a_logits.max())
    assert abs((p / p.sum()).sum() - 1) < 1e-5


def test_lm_forward_errors(random_lm):
    with pytest.raises(ContextError):
        lm_forward(random_lm, np.zeros(random_lm.config.c_max + 1, dtype=int))
    with pytest.raises(ValueError):
        lm_forward(random_lm, np.zeros(0, dtype=int))


def test_lm_config_validation():
    with pytest.raises(ValueError):
        LMConfig(vocab_size=10, d_model=10, n_heads=4)


def test_generate_greedy_is_deterministic(trained_lm, vocab):
    ctx = vocab.encode("the dog saw the")
    a, _ = generate(trained_lm, ctx, 12)
    b, _ = generate(trained_lm, ctx, 12)
    assert np.array_equal(a, b)
    empty, hs = generate(trained_lm, ctx, 0)
    assert empty.shape == (0,) and hs == []


def test_generate_matches_stepwise_argmax(trained_lm, vocab):
    seq = list(vocab.encode("by the pond. the "))
    toks, hidden = generate(trained_lm, np.array(seq), 20)
    c_max = trained_lm.config.c_max
    for x, tok in enumerate(toks):
        logits, H = lm_forward(trained_lm, np.array(seq[-c_max:]))
        assert tok == int(np.argmax(logits))
        assert all(np.array_equal(h, g) for h, g in zip(H, hidden[x]))
        seq.append(int(tok))


def test_argmax_tie_breaks_to_lowest_id():
    from npi.lm.sampling import select_tokens

    logits = np.array([[0.0, 2.0, 2.0, 1.0]])
    assert select_tokens(logits, SamplerConfig(top_k=1), None)[0] == 1


def test_top_k_sampling_stays_in_top_k(rng):
    from npi.lm.sampling import select_tokens

    logits = np.tile(np.array([[5.0, 4.0, -50.0, -50.0]]), (200, 1))
    picks = select_tokens(logits, SamplerConfig(top_k=2, seed=1), rng)
    assert set(picks) <= {0, 1} and len(set(picks)) == 2
    with pytest.raises(ValueError):
        SamplerConfig(top_k=0)


def test_generate_batch_rows_match_single(trained_lm, vocab):
    ctx = np.stack([vocab.encode("the dog saw the "), vocab.encode("the hen ran to t")])
    toks, _ = generate_batch(trained_lm, ctx, 8)
    for row, c in zip(toks, ctx):
        assert np.array_equal(row, generate(trained_lm, c, 8)[0])


def test_pretrain_reduces_loss(corpus, vocab):
    cfg = LMConfig(vocab_size=len(vocab), n_blocks=1, d_model=16, n_heads=2, c_max=16)
    model, losses = pretrain(corpus, vocab, cfg, LMTrainConfig(steps=500, batch_size=16, seed=0))
    assert np.mean(losses[-20:]) < losses[0]
    assert model.frozen


def test_pretrain_empty_corpus(vocab):
    with pytest.raises(DataError):
        pretrain("", vocab, LMConfig(vocab_size=len(vocab), d_model=8, n_heads=2))


def test_memorizes_small_corpus():
    vocab = Vocabulary.from_text(MEMO)
    cfg = LMConfig(vocab_size=len(vocab), n_blocks=2, d_model=32, n_heads=2, c_max=64)
    model, _ = pretrain(MEMO, vocab, cfg, LMTrainConfig(steps=300, batch_size=4, lr=1e-2, warmup=10, seed=0))
    ids = vocab.encode(MEMO)
    logits, _ = model.forward(ids[None, :-1])
    acc = (np.argmax(logits.data[0], axis=-1) == ids[1:]).mean()
    assert acc > 0.95
    assert perplexity(model, vocab, MEMO) < 1.5


def test_uniform_model_perplexity():
    vocab = Vocabulary(["<pad>", "<unk>"] + [chr(ord("0") + i) for i in range(62)])
    model = TransformerLM(LMConfig(vocab_size=64, n_blocks=1, d_model=16, n_heads=2, c_max=32), seed=0).freeze()
    text = "".join(vocab.tokens[2 + (7 * i) % 62] for i in range(30))
    ppl = perplexity(model, vocab, text)
    assert abs(ppl - 64) < 5
    assert perplexity(model, vocab, text) == ppl


def test_perplexity_needs_two_tokens(trained_lm, vocab):
    with pytest.raises(DataError):
        perplexity(trained_lm, vocab, "a")


def test_fine_tune_isolation_and_gain(trained_lm, vocab):
    ctx = vocab.encode("the dog saw the ")
    before_out = generate(trained_lm, ctx, 10)[0]
    digest = trained_lm.digest()
    text = target_corpus(300, seed=4)
    tuned, _ = fine_tune(trained_lm, vocab, text, LMTrainConfig(steps=80, batch_size=16, lr=1e-3, warmup=5, seed=2))
    trained_lm.verify_frozen()
    assert trained_lm.digest() == digest
    assert np.array_equal(generate(trained_lm, ctx, 10)[0], before_out)
    probe = target_corpus(60, seed=99)
    assert perplexity(tuned, vocab, probe) < perplexity(trained_lm, vocab, probe)


def test_frozen_contract_detects_change(random_lm):
    random_lm.verify_frozen()
    p = random_lm.parameters()[0]
    p.data[0, 0] += 1
    with pytest.raises(FrozenModelError):
        random_lm.verify_frozen()


def test_frozen_model_excluded_from_gradients(random_lm):
    logits, _ = random_lm.forward(np.array([[1, 2, 3]]))
    assert not logits.requires_grad


def test_save_load_round_trip(tmp_path, trained_lm, vocab):
    from npi.lm import save_lm

    save_lm(trained_lm, vocab, tmp_path)
    model, v = load_lm(tmp_path)
    assert model.digest() == trained_lm.digest() and model.frozen
    assert v.tokens == vocab.tokens


def test_synthetic_corpus_properties():
    s = sentences(5000, seed=1)
    with_cat = sum(" cat " in f" {x} " for x in s) / len(s)
    assert 0.02 < with_cat < 0.12
    assert all("cat" not in x for x in generic_sentences(300, seed=2))
    assert all(" cat " in f" {x} " for x in target_corpus(50).split(". ") if x.strip())
    assert synthetic_corpus(40, seed=3) == synthetic_corpus(40, seed=3)


def test_injected_block_changes_only_downstream(random_lm, rng):
    ids = np.array([[1, 4, 6, 2]])
    _, base = random_lm.forward(ids)
    d = T.Tensor(rng.normal(size=(1, 4, 16)))
    _, pert = random_lm.forward(ids, inject={2: d})
    assert np.array_equal(pert[0].data, base[0].data)
    assert np.allclose(pert[1].data, base[1].data + d.data, atol=1e-6)
    assert not np.allclose(pert[3].data, base[3].data)
