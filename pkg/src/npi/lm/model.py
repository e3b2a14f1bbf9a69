"""A small pre-LayerNorm GPT-style transformer whose block outputs are exposed as taps."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from npi.autodiff import tensor as T
from npi.autodiff.nn import LayerNorm, Linear, Module
from npi.autodiff.tensor import Tensor, no_grad


class ContextError(ValueError):
    """Input sequence longer than the model's context."""


class FrozenModelError(RuntimeError):
    """A frozen model's weights no longer match the recorded digest."""


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    n_blocks: int = 4
    d_model: int = 128
    n_heads: int = 4
    c_max: int = 64
    d_ff: int | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.n_blocks, self.d_model, self.n_heads, self.c_max) < 1:
            raise ValueError("LMConfig sizes must be positive")

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


class Block(Module):
    def __init__(self, cfg: LMConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.d_model
        std = 0.02
        proj_std = 0.02 / np.sqrt(2 * cfg.n_blocks)
        self.n_heads = cfg.n_heads
        self.ln1 = LayerNorm(d)
        self.wq = Linear(d, d, rng, std=std)
        self.wk = Linear(d, d, rng, std=std)
        self.wv = Linear(d, d, rng, std=std)
        self.wo = Linear(d, d, rng, std=proj_std)
        self.ln2 = LayerNorm(d)
        self.fc = Linear(d, cfg.ff_dim, rng, std=std)
        self.proj = Linear(cfg.ff_dim, d, rng, std=proj_std)

    def _heads(self, x: Tensor, b: int, n: int) -> Tensor:
        h = self.n_heads
        return T.transpose(T.reshape(x, (b, n, h, -1)), (0, 2, 1, 3))

    def attention(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        q = self._heads(self.wq(x), b, n)
        k = self._heads(self.wk(x), b, n)
        v = self._heads(self.wv(x), b, n)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d // self.n_heads))
        att = T.softmax_rows(T.causal_mask(scores))
        y = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        return self.wo(y)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attention(self.ln1(x)))
        return T.add(x, self.proj(T.gelu(self.fc(self.ln2(x)))))


class TransformerLM(Module):
    """Decoder-only LM. ``forward`` returns logits and the n block outputs."""

    def __init__(self, cfg: LMConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        object.__setattr__(self, "config", cfg)
        object.__setattr__(self, "_digest", None)
        self.tok_emb = Tensor(rng.normal(0, 0.02, (cfg.vocab_size, cfg.d_model)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0, 0.01, (cfg.c_max, cfg.d_model)), requires_grad=True)
        self.blocks = Module()
        for i in range(cfg.n_blocks):
            self.blocks.add_module(str(i), Block(cfg, rng))
        self.ln_f = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, cfg.vocab_size, rng, std=0.02)

    @property
    def n_blocks(self) -> int:
        return self.config.n_blocks

    def block(self, i: int) -> Block:
        return self.blocks._children[str(i)]

    # -- forward ---------------------------------------------------------
    def forward(self, ids, inject: Mapping[int, Tensor] | None = None) -> tuple[Tensor, list[Tensor]]:
        """Run the model on a [B, L] (or [L]) id array.

        ``inject`` maps 1-based block indices to [B, L, d_model] tensors that
        are added element-wise to that block's output before the next block.
        Returns ([B, L, V] logits, [h_1 .. h_n] each [B, L, d_model]).
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        b, n = ids.shape
        if n == 0:
            raise ValueError("empty token sequence")
        if n > self.config.c_max:
            raise ContextError(f"sequence length {n} exceeds c_max={self.config.c_max}")
        inject = inject or {}
        for j in inject:
            if not 1 <= j <= self.n_blocks:
                raise IndexError(f"tap index {j} outside [1, {self.n_blocks}]")
        pos = T.getitem(self.pos_emb, slice(0, n))
        pos = T.reshape(pos, (1, n, -1))
        x = T.embedding(self.tok_emb, ids)
        x = T.add(x, T.concat([pos] * b, axis=0) if b > 1 else pos)
        hidden = []
        for j in range(1, self.n_blocks + 1):
            x = self.block(j - 1)(x)
            if j in inject:
                d = T.as_tensor(inject[j], dtype=x.dtype)
                if d.shape != x.shape:
                    raise T.DimensionError(f"perturbation at block {j} has shape {d.shape}, expected {x.shape}")
                x = T.add(x, d)
            hidden.append(x)
        logits = self.head(self.ln_f(x))
        return logits, hidden

    # -- frozen contract -------------------------------------------------
    def digest(self) -> bytes:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(np.asarray(p.shape, dtype="<u8").tobytes())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.digest()

    def freeze(self) -> "TransformerLM":
        self.requires_grad_(False)
        for p in self.parameters():
            p.grad = None
        object.__setattr__(self, "_digest", self.digest())
        return self

    @property
    def frozen(self) -> bool:
        return self._digest is not None

    @property
    def frozen_digest(self) -> bytes | None:
        return self._digest

    def verify_frozen(self) -> None:
        if self._digest is None:
            raise FrozenModelError("model was never frozen")
        if self.digest() != self._digest:
            raise FrozenModelError("frozen model weights changed")

    def trainable_copy(self) -> "TransformerLM":
        """Independent, unfrozen weight copy."""
        other = copy.deepcopy(self)
        object.__setattr__(other, "_digest", None)
        other.requires_grad_(True)
        return other


def lm_forward(model: TransformerLM, tokens) -> tuple[np.ndarray, list[np.ndarray]]:
    """Next-token logits [V] and hidden states [len x d_model] per block for one sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("lm_forward expects a nonempty 1-d token sequence")
    with no_grad():
        logits, hidden = model.forward(tokens[None, :])
    return logits.data[0, -1], [h.data[0] for h in hidden]


LM_WEIGHTS = "lm.npiw"
LM_CONFIG = "lm.json"
VOCAB_FILE = "vocab.txt"


def save_lm(model: TransformerLM, vocab, directory) -> Path:
    """Write weights, config and vocabulary into one directory."""
    from npi.autodiff.checkpoint import save_weights

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_weights(d / LM_WEIGHTS, model.state_dict())
    (d / LM_CONFIG).write_text(json.dumps(model.config.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    vocab.save(d / VOCAB_FILE)
    return d


def load_lm(directory):
    """Inverse of :func:`save_lm`; the model comes back frozen."""
    from npi.autodiff.checkpoint import load_weights
    from npi.lm.vocab import Vocabulary

    d = Path(directory)
    cfg = LMConfig(**json.loads((d / LM_CONFIG).read_text(encoding="utf-8")))
    model = TransformerLM(cfg)
    model.load_state_dict(load_weights(d / LM_WEIGHTS))
    model.freeze()
    return model, Vocabulary.load(d / VOCAB_FILE)
