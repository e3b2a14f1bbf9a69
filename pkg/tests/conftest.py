import sys

import numpy as np
import pytest

from npi.control import ControlConfig
from npi.datagen import WordPresence, build_dataset
from npi.lm import LMConfig, LMTrainConfig, TransformerLM, Vocabulary, pretrain
from npi.lm.corpus import synthetic_corpus

CFG = ControlConfig(taps=(1, 2), window=4, c_max=16)


@pytest.fixture(scope="session")
def corpus():
    return synthetic_corpus(2000, seed=11)


@pytest.fixture(scope="session")
def vocab(corpus):
    return Vocabulary.from_text(corpus)


@pytest.fixture(scope="session")
def trained_lm(corpus, vocab):
    """Small LM that has learned the sentence grammar well enough to harvest from."""
    cfg = LMConfig(vocab_size=len(vocab), n_blocks=2, d_model=16, n_heads=2, c_max=16)
    model, _ = pretrain(corpus, vocab, cfg, LMTrainConfig(steps=600, batch_size=32, seed=1), init_seed=1)
    return model


@pytest.fixture
def random_lm():
    cfg = LMConfig(vocab_size=24, n_blocks=4, d_model=16, n_heads=2, c_max=16)
    return TransformerLM(cfg, seed=0).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ds(trained_lm, vocab, corpus):
    """60 balanced word:dog windows from the fixture LM."""
    return build_dataset(trained_lm, vocab, corpus, WordPresence("dog"), CFG, 60, seed=5, batch_size=32)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
