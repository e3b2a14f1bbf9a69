"""The dataset Q and its NPIQ binary codec.

Layout (little-endian)::

    "NPIQ" u32 version u32 N_Q u16 w u16 m u16 c_max u16 d_model
    u16 taps[m] u8 metric_tag u16 blob_len blob[blob_len]
    u8 lm_digest[32] u64 seed
    N_Q x ( u8 label u16 n_tok u32 ids[n_tok] f32 S[w * m * c_max * d_model] )
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from npi.control import ControlConfig
from npi.datagen.metrics import TargetMetric, decode_metric

MAGIC = b"NPIQ"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class DataExample:
    S: np.ndarray  # [w, m, c_max, d] float32
    label: int
    tokens: np.ndarray  # T_in, int64


@dataclass
class Dataset:
    metric: TargetMetric
    config: ControlConfig
    d_model: int
    lm_digest: bytes
    seed: int
    S: np.ndarray  # [N, w, m, c_max, d] float32
    labels: np.ndarray  # [N] uint8
    tokens: list[np.ndarray]
    partial: bool = False
    corpus_id: str = ""
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.lm_digest) != 32:
            raise ValueError("lm digest must be 32 bytes")
        self.S = np.asarray(self.S, dtype=np.float32).reshape(-1, *self.shape)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if not len(self.S) == len(self.labels) == len(self.tokens):
            raise ValueError("examples disagree in count")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.config.sequence_shape(self.d_model)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, j: int) -> DataExample:
        return DataExample(self.S[j], int(self.labels[j]), self.tokens[j])

    def class_counts(self) -> tuple[int, int]:
        ones = int(self.labels.sum())
        return len(self) - ones, ones

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.metric, self.config, self.d_model, self.lm_digest, self.seed,
            self.S[idx], self.labels[idx], [self.tokens[i] for i in idx], self.partial, self.corpus_id,
        )

    @classmethod
    def from_examples(cls, examples, metric, config, d_model, lm_digest, seed, **kw) -> "Dataset":
        shape = config.sequence_shape(d_model)
        S = np.stack([e.S for e in examples]) if examples else np.zeros((0, *shape), np.float32)
        return cls(metric, config, d_model, lm_digest, seed, S, [e.label for e in examples], [np.asarray(e.tokens, np.int64) for e in examples], **kw)


def _header(ds: Dataset) -> bytes:
    cfg = ds.config
    blob = ds.metric.encode()
    parts = [
        MAGIC,
        struct.pack("<II", VERSION, len(ds)),
        struct.pack("<4H", cfg.window, cfg.m, cfg.c_max, ds.d_model),
        struct.pack(f"<{cfg.m}H", *cfg.taps),
        struct.pack("<BH", ds.metric.tag, len(blob)),
        blob,
        ds.lm_digest,
        struct.pack("<Q", ds.seed),
    ]
    return b"".join(parts)


def expected_size(ds: Dataset) -> int:
    """Byte count of the encoded dataset, from the header fields alone."""
    block = int(np.prod(ds.shape)) * 4
    return len(_header(ds)) + sum(1 + 2 + 4 * len(t) + block for t in ds.tokens)


def encode_dataset(ds: Dataset) -> bytes:
    out = [_header(ds)]
    for j in range(len(ds)):
        toks = np.asarray(ds.tokens[j])
        if len(toks) > 0xFFFF:
            raise ValueError("input token count exceeds u16")
        out.append(struct.pack("<BH", int(ds.labels[j]), len(toks)))
        out.append(toks.astype("<u4").tobytes())
        out.append(ds.S[j].astype("<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError("truncated dataset file")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_dataset(buf: bytes) -> Dataset:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise DatasetFormatError("bad magic (not an NPIQ file)")
    version, n = r.unpack("<II")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported NPIQ version {version}")
    w, m, c_max, d = r.unpack("<4H")
    taps = r.unpack(f"<{m}H")
    tag, blob_len = r.unpack("<BH")
    try:
        metric = decode_metric(tag, r.take(blob_len))
        config = ControlConfig(taps=taps, window=w, c_max=c_max)
    except ValueError as e:
        raise DatasetFormatError(f"bad header: {e}") from e
    digest = r.take(32)
    (seed,) = r.unpack("<Q")
    block = w * m * c_max * d
    S = np.empty((n, w, m, c_max, d), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint8)
    tokens = []
    for j in range(n):
        lab, ntok = r.unpack("<BH")
        if lab > 1:
            raise DatasetFormatError(f"example {j}: label {lab} is not binary")
        labels[j] = lab
        tokens.append(np.frombuffer(r.take(4 * ntok), dtype="<u4").astype(np.int64))
        S[j] = np.frombuffer(r.take(4 * block), dtype="<f4").reshape(w, m, c_max, d)
    if r.pos != len(buf):
        raise DatasetFormatError(f"{len(buf) - r.pos} trailing bytes")
    return Dataset(metric, config, d, digest, seed, S, labels, tokens)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())
