"""Synthetic English-like corpus with a controllable rate for one target word.

Text is a stream of short sentences ``the <animal> <verb> <place>.``. Some
sentences are ``the <animal> saw the <animal>.``. The next subject is the
most recently mentioned animal with probability ``keep_prob``; otherwise a
fresh animal is drawn, and fresh draws pick the target with probability
``base_rate``. A model trained on this text learns to
repeat the most recent animal, so the target is rare in free generation but
easy to elicit by putting it into the context.
"""

from __future__ import annotations

import numpy as np

ANIMALS = (
    "dog", "fox", "pig", "owl", "hen", "ram", "yak", "emu", "bee", "ant",
    "bat", "elk", "gnu", "jay", "eel", "rat", "ape", "doe", "koi", "gnat",
)
# fresh draws favour the first animal so greedy decoding has a clear default
LEAD_WEIGHT = 4.0
VERBS = ("sat", "ran", "hid", "ate", "slept", "stood", "played", "waited")
PLACES = (
    "on the mat",
    "in the box",
    "by the tree",
    "near the pond",
    "under the bed",
    "at home",
    "in the barn",
    "on the hill",
)


def sentences(
    n: int,
    target: str = "cat",
    base_rate: float = 0.05,
    keep_prob: float = 0.8,
    seed: int = 0,
    meet_prob: float = 0.3,
    animals=ANIMALS,
) -> list[str]:
    rng = np.random.default_rng(seed)
    others = [a for a in animals if a != target]
    weights = np.ones(len(others))
    weights[0] = LEAD_WEIGHT
    weights /= weights.sum()

    def fresh():
        return target if rng.random() < base_rate else others[rng.choice(len(others), p=weights)]

    out = []
    last = None
    for _ in range(n):
        subject = last if last is not None and rng.random() < keep_prob else fresh()
        if rng.random() < meet_prob:
            obj = fresh()
            out.append(f"the {subject} saw the {obj}.")
            last = obj
        else:
            verb = VERBS[rng.integers(len(VERBS))]
            place = PLACES[rng.integers(len(PLACES))]
            out.append(f"the {subject} {verb} {place}.")
            last = subject
    return out


def synthetic_corpus(
    n_sentences: int,
    target: str = "cat",
    base_rate: float = 0.05,
    keep_prob: float = 0.8,
    seed: int = 0,
) -> str:
    """One space-separated stream of generated sentences."""
    return " ".join(sentences(n_sentences, target, base_rate, keep_prob, seed)) + " "


def target_corpus(n_sentences: int, target: str = "cat", seed: int = 0) -> str:
    """Sentences that all feature the target word (fine-tuning baseline data)."""
    return synthetic_corpus(n_sentences, target=target, base_rate=1.0, keep_prob=0.0, seed=seed)


def generic_sentences(n: int, seed: int = 0) -> list[str]:
    """Plain sentences for fitting the long-word threshold."""
    return sentences(n, base_rate=0.0, seed=seed)
