from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD = "<pad>"
UNK = "<unk>"
UNK_TEXT = "�"

_ESCAPES = {"\\": "\\\\", "\n": "\\n", "\r": "\\r", "\t": "\\t"}
_UNESCAPES = {v: k for k, v in _ESCAPES.items()}


def _escape(tok: str) -> str:
    return "".join(_ESCAPES.get(c, c) for c in tok)


def _unescape(line: str) -> str:
    out, i = [], 0
    while i < len(line):
        two = line[i : i + 2]
        if two in _UNESCAPES:
            out.append(_UNESCAPES[two])
            i += 2
        else:
            out.append(line[i])
            i += 1
    return "".join(out)


class Vocabulary:
    """Character vocabulary; id 0 is padding, id 1 is unknown."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:2]) != [PAD, UNK]:
            raise ValueError("vocabulary must start with <pad>, <unk>")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        return cls([PAD, UNK] + sorted(set(text)))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def tokenize(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(c, unk) for c in text]

    def detokenize(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.pad_id:
                continue
            out.append(UNK_TEXT if i == self.unk_id else self.tokens[i])
        return "".join(out)

    def encode(self, text: str) -> np.ndarray:
        return np.asarray(self.tokenize(text), dtype=np.int64)

    # one token per line, line index = id; control characters are backslash-escaped
    def save(self, path) -> None:
        Path(path).write_text("\n".join(_escape(t) for t in self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls([_unescape(line) for line in lines])
