"""Target metrics: deterministic text -> {0, 1} labelling rules."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import ClassVar, Sequence

WORD_RE = re.compile(r"[a-z0-9']+")


def words(text: str) -> list[str]:
    """Lowercased alphanumeric runs; punctuation never joins a word."""
    return WORD_RE.findall(text.lower())


def _word_pattern(targets: Sequence[str]) -> re.Pattern:
    alt = "|".join(re.escape(t.lower()) for t in sorted(targets, key=len, reverse=True))
    return re.compile(rf"(?<![a-z0-9'])(?:{alt})(?![a-z0-9'])")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class TargetMetric:
    """Base class. ``polarity`` is the raw outcome that maps to label 1."""

    tag: ClassVar[int] = 0
    polarity: bool = True

    def fires(self, text: str) -> bool:
        raise NotImplementedError

    def __call__(self, text: str) -> int:
        return int(self.fires(text) == self.polarity)

    def first_fire(self, text: str) -> int | None:
        """Index of the character at which the label first becomes 1, or None."""
        for k in range(len(text)):
            if self(text[: k + 1]):
                return k
        return None

    def injection_text(self, rng) -> str | None:
        return None

    def params(self) -> dict:
        raise NotImplementedError

    def encode(self) -> bytes:
        return json.dumps({**self.params(), "polarity": self.polarity}, sort_keys=True).encode()


@dataclass(frozen=True)
class WordListPresence(TargetMetric):
    tag: ClassVar[int] = 2
    targets: tuple[str, ...] = ()

    def __post_init__(self):
        targets = tuple(t.lower() for t in self.targets)
        if not targets or any(not words(t) or " ".join(words(t)) != t for t in targets):
            raise MetricError(f"targets must be nonempty plain words, got {self.targets!r}")
        object.__setattr__(self, "targets", targets)

    @property
    def _pattern(self) -> re.Pattern:
        return _word_pattern(self.targets)

    def fires(self, text: str) -> bool:
        return self._pattern.search(text.lower()) is not None

    def first_fire(self, text: str) -> int | None:
        if not self.polarity:
            return super().first_fire(text)
        m = self._pattern.search(text.lower())
        return None if m is None else m.end() - 1

    def injection_text(self, rng) -> str:
        return self.targets[int(rng.integers(len(self.targets)))] if len(self.targets) > 1 else self.targets[0]

    def params(self) -> dict:
        return {"targets": list(self.targets)}


class WordPresence(WordListPresence):
    """Whole-word, case-insensitive presence of one target word."""

    tag: ClassVar[int] = 1

    def __init__(self, target: str, polarity: bool = True):
        object.__setattr__(self, "polarity", polarity)
        object.__setattr__(self, "targets", (target,))
        self.__post_init__()

    @property
    def target(self) -> str:
        return self.targets[0]

    def params(self) -> dict:
        return {"target": self.target}


@dataclass(frozen=True)
class AvgWordLength(TargetMetric):
    """Fires when the mean word length exceeds ``threshold`` characters."""

    tag: ClassVar[int] = 3
    threshold: float = 5.0

    def fires(self, text: str) -> bool:
        ws = words(text)
        return bool(ws) and sum(map(len, ws)) / len(ws) > self.threshold

    def params(self) -> dict:
        return {"threshold": self.threshold}


_BY_TAG = {1: WordPresence, 2: WordListPresence, 3: AvgWordLength}


def decode_metric(tag: int, blob: bytes) -> TargetMetric:
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise MetricError(f"unknown metric tag {tag}")
    p = json.loads(blob.decode())
    polarity = bool(p.pop("polarity"))
    if cls is WordPresence:
        return WordPresence(p["target"], polarity=polarity)
    if cls is WordListPresence:
        return WordListPresence(polarity=polarity, targets=tuple(p["targets"]))
    return AvgWordLength(polarity=polarity, threshold=float(p["threshold"]))


def parse_metric(spec: str) -> TargetMetric:
    """CLI form: ``word:cat``, ``words:cat,dog``, ``avglen:5.26``; a leading ``!`` flips polarity."""
    polarity = not spec.startswith("!")
    kind, _, arg = spec.lstrip("!").partition(":")
    if kind == "word":
        return WordPresence(arg, polarity=polarity)
    if kind == "words":
        return WordListPresence(polarity=polarity, targets=tuple(a for a in arg.split(",") if a))
    if kind == "avglen":
        return AvgWordLength(polarity=polarity, threshold=float(arg))
    raise MetricError(f"unknown metric spec {spec!r}")


def label(window_text: str, metric: TargetMetric) -> int:
    return metric(window_text)
