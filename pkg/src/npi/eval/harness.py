"""Running the models under comparison and folding per-context rows into a report."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from npi.autodiff.tensor import no_grad
from npi.control import ControlConfig, controlled_generate
from npi.datagen.harvest import ordered_map
from npi.datagen.metrics import TargetMetric
from npi.eval.embeddings import EmbeddingTable
from npi.eval.metrics import as_metric, shift_rows, word_length_row
from npi.lm.model import TransformerLM
from npi.lm.sampling import SamplerConfig, generate_batch, select_tokens
from npi.lm.vocab import Vocabulary

CSV_COLUMNS = ("context_id", "original_text", "controlled_text", "target_hit", "shift_flag", "shift_distance", "perplexity")


class BaselineConfigError(ValueError):
    pass


def continuation_nll(model: TransformerLM, contexts: np.ndarray, cont: np.ndarray) -> np.ndarray:
    """[B, K] NLL of each continuation token given everything before it (last c_max tokens)."""
    seq = np.concatenate([contexts, cont], axis=1)
    L, K = contexts.shape[1], cont.shape[1]
    c_max = model.config.c_max
    out = np.empty(cont.shape, dtype=np.float64)
    with no_grad():
        for k in range(K):
            logits, _ = model.forward(seq[:, max(0, L + k - c_max) : L + k])
            z = logits.data[:, -1].astype(np.float64)
            z -= z.max(axis=1, keepdims=True)
            lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            out[:, k] = -lp[np.arange(len(seq)), cont[:, k]]
    return out


def perplexity_proxy(model: TransformerLM, contexts: np.ndarray, cont: np.ndarray) -> np.ndarray:
    """Per-row exp(mean NLL) of the continuation under the frozen, unmodified LM."""
    if cont.shape[1] == 0:
        return np.ones(len(cont))
    return np.exp(continuation_nll(model, contexts, cont).mean(axis=1))


def target_ids(vocab: Vocabulary, word: str) -> list[int]:
    ids = vocab.tokenize(word)
    if not ids or vocab.unk_id in ids:
        raise BaselineConfigError(f"target {word!r} is not representable in the vocabulary")
    return ids


def word_prob_baseline(
    model: TransformerLM,
    vocab: Vocabulary,
    contexts,
    steps: int,
    target: str,
    mode: str,
) -> np.ndarray:
    """Greedy decoding with direct control of output probabilities.

    induce: whenever the first target token has nonzero probability, emit
    the whole target token sequence; otherwise take the argmax.
    avoid: before each pick, set to -inf the logit of any token that would
    complete a whole-word occurrence of the target.
    """
    if mode not in ("induce", "avoid"):
        raise BaselineConfigError(f"mode must be induce or avoid, got {mode!r}")
    tids = target_ids(vocab, target)
    seq = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    bsz = seq.shape[0]
    c_max = model.config.c_max
    out = np.zeros((bsz, steps), dtype=np.int64)
    pending = [[] for _ in range(bsz)]
    last, prefix = tids[-1], [vocab.tokens[t] for t in tids[:-1]]
    word = target.lower()
    for x in range(steps):
        with no_grad():
            logits, _ = model.forward(seq[:, -c_max:])
        z = logits.data[:, -1].astype(np.float64)
        if mode == "induce":
            z = z - z.max(axis=1, keepdims=True)
            p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            nxt = np.argmax(z, axis=1)
            for b in range(bsz):
                if not pending[b] and p[b, tids[0]] > 0:
                    pending[b] = list(tids)
                if pending[b]:
                    nxt[b] = pending[b].pop(0)
        else:
            for b in range(bsz):
                tail = vocab.detokenize(seq[b, -(len(prefix) + 1) :]).lower()
                if _completes(tail, word):
                    z[b, last] = -np.inf
            nxt = select_tokens(z, SamplerConfig(), None)
        out[:, x] = nxt
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out


def _completes(tail: str, word: str) -> bool:
    """Would appending the word's last char to ``tail`` end a whole-word occurrence?"""
    stem = word[:-1]
    if not tail.endswith(stem):
        return False
    before = tail[: len(tail) - len(stem)]
    return not before or not (before[-1].isalnum() or before[-1] == "'")


@dataclass
class EvalReport:
    model_id: str
    n: int
    target_in_output: float
    embed_shifts: float
    avg_shift: float
    avg_word_length: float
    num_long_words: float
    perplexity_proxy: float
    length_threshold: float
    rows: list[dict] = field(default_factory=list)

    @classmethod
    def from_rows(cls, model_id: str, rows: list[dict], length_threshold: float) -> "EvalReport":
        if not rows:
            return cls(model_id, 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, length_threshold, [])
        lengths = [word_length_row(r["controlled_text"], length_threshold) for r in rows]
        return cls(
            model_id=model_id,
            n=len(rows),
            target_in_output=float(np.mean([r["target_hit"] for r in rows])),
            embed_shifts=float(np.mean([r["shift_flag"] for r in rows])),
            avg_shift=float(np.mean([r["shift_distance"] for r in rows])),
            avg_word_length=float(np.mean([a for a, _ in lengths])),
            num_long_words=float(np.mean([k for _, k in lengths])),
            perplexity_proxy=float(np.mean([r["perplexity"] for r in rows])),
            length_threshold=length_threshold,
            rows=rows,
        )

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        return d

    def to_json(self) -> str:
        return json.dumps({**self.summary(), "rows": self.rows}, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: r[k] for k in CSV_COLUMNS})
        return buf.getvalue()

    def write(self, json_path, csv_path) -> None:
        with open(json_path, "w", encoding="utf-8") as f:
            f.write(self.to_json() + "\n")
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_csv())


def npi_generate(model, contexts, npi: Callable, config: ControlConfig, n_windows: int = 1, sampler=SamplerConfig()) -> np.ndarray:
    """``n_windows`` consecutive controlled windows; each window gets its own NPI call."""
    seq = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    outs = []
    for _ in range(n_windows):
        toks, _, _ = controlled_generate(model, seq, npi, config, sampler)
        outs.append(toks)
        seq = np.concatenate([seq, toks], axis=1)[:, -config.c_max :]
    return np.concatenate(outs, axis=1)


def evaluate(
    model: TransformerLM,
    vocab: Vocabulary,
    contexts,
    target,
    table: EmbeddingTable,
    *,
    model_id: str = "unmodified",
    npi: Callable | None = None,
    config: ControlConfig | None = None,
    steps: int | None = None,
    n_windows: int = 1,
    baseline: str | None = None,
    controlled_model: TransformerLM | None = None,
    length_threshold: float = float("inf"),
    distance: str = "euclidean",
    batch_size: int = 100,
    jobs: int = 1,
) -> EvalReport:
    """Generate original and controlled continuations for every context and score them.

    The controlled side is, in order of precedence: an NPI (windowed
    controlled generation), a word-prob baseline ("induce"/"avoid"), another
    LM such as a fine-tuned copy, or the unmodified LM itself.
    """
    model.verify_frozen()
    ctx = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    metric: TargetMetric = as_metric(target)
    word = target if isinstance(target, str) else metric.targets[0]
    if npi is not None:
        if config is None:
            raise ValueError("an NPI evaluation needs its ControlConfig")
        steps = config.window * n_windows
    if steps is None:
        raise ValueError("steps is required without an NPI")

    def run(lo: int) -> list[dict]:
        c = ctx[lo : lo + batch_size]
        orig, _ = generate_batch(model, c, steps)
        if npi is not None:
            ctrl = npi_generate(model, c, npi, config, n_windows)
        elif baseline is not None:
            ctrl = word_prob_baseline(model, vocab, c, steps, word, baseline)
        elif controlled_model is not None:
            ctrl, _ = generate_batch(controlled_model, c, steps)
        else:
            ctrl = orig
        ppl = perplexity_proxy(model, c, ctrl)
        o_txt = [vocab.detokenize(t) for t in orig]
        c_txt = [vocab.detokenize(t) for t in ctrl]
        flags, moves = shift_rows(o_txt, c_txt, target, table, distance)
        return [
            {
                "context_id": lo + i,
                "original_text": o_txt[i],
                "controlled_text": c_txt[i],
                "target_hit": int(metric(c_txt[i])),
                "shift_flag": int(flags[i]),
                "shift_distance": float(moves[i]),
                "perplexity": float(ppl[i]),
            }
            for i in range(len(c))
        ]

    rows = [r for part in ordered_map(run, range(0, len(ctx), batch_size), jobs) for r in part]
    model.verify_frozen()
    return EvalReport.from_rows(model_id, rows, length_threshold)


def prescreen_contexts(model: TransformerLM, vocab: Vocabulary, contexts, target, steps: int, batch_size: int = 100) -> np.ndarray:
    """Indices of contexts whose unmodified greedy continuation contains the target."""
    ctx = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    metric = as_metric(target)
    keep = []
    for lo in range(0, len(ctx), batch_size):
        toks, _ = generate_batch(model, ctx[lo : lo + batch_size], steps)
        keep += [lo + i for i, t in enumerate(toks) if metric(vocab.detokenize(t))]
    return np.array(keep, dtype=np.int64)


def summary_from_rows(rows: Sequence[dict], length_threshold: float) -> dict:
    """Independent recomputation used to audit an emitted report."""
    return EvalReport.from_rows("audit", list(rows), length_threshold).summary()
