"""Extracting input controls and injecting perturbations into the frozen LM.

Shapes used throughout (B = batch):

* activation bundle: ``[m, c_max, d_model]`` - tapped block outputs of one pass,
  zero-padded at the end to ``c_max`` positions
* activation sequence S / S': ``[B, w, m, c_max, d_model]``
* perturbation sequence D: same shape as S; ``D[:, x, l]`` is added to the
  output of block ``taps[l]`` during pass ``x``, positions beyond the pass's
  current length are ignored
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from npi.autodiff import tensor as T
from npi.autodiff.tensor import Tensor, no_grad
from npi.lm.model import TransformerLM
from npi.lm.sampling import SamplerConfig, generate_batch, select_tokens


class ControlConfigError(ValueError):
    pass


class InjectionError(ValueError):
    pass


@dataclass(frozen=True)
class ControlConfig:
    """Tap indices (1-based, strictly increasing), window length, fixed activation length."""

    taps: tuple[int, ...] = (2, 4)
    window: int = 10
    c_max: int = 64
    teacher_forcing: bool = False

    def __post_init__(self):
        taps = tuple(int(t) for t in self.taps)
        object.__setattr__(self, "taps", taps)
        if not taps or any(b <= a for a, b in zip(taps, taps[1:])):
            raise ControlConfigError("taps must be a nonempty, strictly increasing list")
        if taps[0] < 1:
            raise ControlConfigError("tap indices are 1-based")
        if self.window < 1:
            raise ControlConfigError("window must be >= 1")
        if self.window > self.c_max:
            raise ControlConfigError(f"window {self.window} exceeds c_max {self.c_max}")

    @property
    def m(self) -> int:
        return len(self.taps)

    def check_model(self, model: TransformerLM) -> None:
        if self.taps[-1] > model.n_blocks:
            raise ControlConfigError(f"tap {self.taps[-1]} outside [1, {model.n_blocks}]")
        if self.c_max != model.config.c_max:
            raise ControlConfigError("control c_max must equal the model's c_max")

    def sequence_shape(self, d_model: int) -> tuple[int, int, int, int]:
        return (self.window, self.m, self.c_max, d_model)


def _pad(a: np.ndarray, length: int) -> np.ndarray:
    n = a.shape[-2]
    if n >= length:
        return a[..., :length, :]
    pad = [(0, 0)] * a.ndim
    pad[-2] = (0, length - n)
    return np.pad(a, pad)


def extract_controls(hidden: Sequence[np.ndarray], config: ControlConfig) -> np.ndarray:
    """Select the tapped block outputs of one pass as an [m, c_max, d] bundle.

    ``hidden`` holds all n block outputs (each [len, d] or [B, len, d]).
    """
    n = len(hidden)
    for t in config.taps:
        if not 1 <= t <= n:
            raise ControlConfigError(f"tap {t} outside [1, {n}]")
    return np.stack([_pad(np.asarray(hidden[t - 1]), config.c_max) for t in config.taps], axis=-3)


def npic_forward(model: TransformerLM, tokens, perturbation, config: ControlConfig):
    """One controlled forward pass (NPIC).

    Runs the model block by block on ``tokens`` and adds ``perturbation[l]``
    (an [m, c_max, d] bundle, or None) to the output of block ``taps[l]``.
    Returns (next-token logits [V], perturbed block outputs H').
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    inject = None
    if perturbation is not None:
        d = T.as_tensor(perturbation)
        expect = (config.m, config.c_max, model.config.d_model)
        if d.shape != expect:
            raise InjectionError(f"perturbation shape {d.shape}, expected {expect}")
        inject = {tap: T.reshape(T.getitem(d, (l, slice(0, n))), (1, n, -1)) for l, tap in enumerate(config.taps)}
    with no_grad():
        logits, hidden = model.forward(tokens[None, :], inject=inject)
    return logits.data[0, -1], [h.data[0] for h in hidden]


def controlled_rollout(
    model: TransformerLM,
    contexts,
    perturbation: Tensor | None,
    config: ControlConfig,
    sampler: SamplerConfig = SamplerConfig(),
    forced_tokens=None,
):
    """Run w controlled passes from equal-length contexts.

    ``perturbation`` is a [B, w, m, c_max, d] tensor (None runs unperturbed).
    Sampled tokens are fed back autoregressively unless ``forced_tokens``
    ([B, w]) is given, in which case those are appended instead.
    Returns (tokens [B, w], S' tensor [B, w, m, c_max, d]); S' stays on the
    autodiff graph when the perturbation requires grad.
    """
    seq = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    bsz = seq.shape[0]
    w, c_max = config.window, config.c_max
    d_model = model.config.d_model
    if perturbation is not None:
        expect = (bsz, w, config.m, c_max, d_model)
        if perturbation.shape != expect:
            raise InjectionError(f"perturbation shape {perturbation.shape}, expected {expect}")
    rng = np.random.default_rng(sampler.seed) if sampler.top_k > 1 else None
    out = np.zeros((bsz, w), dtype=np.int64)
    passes = []
    for x in range(w):
        window = seq[:, -c_max:]
        n = window.shape[1]
        inject = None
        if perturbation is not None:
            inject = {tap: T.getitem(perturbation, (slice(None), x, l, slice(0, n))) for l, tap in enumerate(config.taps)}
        logits, hidden = model.forward(window, inject=inject)
        nxt = select_tokens(logits.data[:, -1], sampler, rng)
        out[:, x] = nxt
        taps = [T.pad_rows(hidden[t - 1], c_max, axis=1) for t in config.taps]
        passes.append(T.stack(taps, axis=1))
        feed = nxt if forced_tokens is None else np.asarray(forced_tokens)[:, x]
        seq = np.concatenate([seq, feed[:, None]], axis=1)
    return out, T.stack(passes, axis=1)


def collect_sequence(hidden_per_pass, config: ControlConfig) -> np.ndarray:
    """Stack generate_batch(..., taps=config.taps) output into S [B, w, m, c_max, d]."""
    return np.stack([np.stack([_pad(h, config.c_max) for h in hs], axis=1) for hs in hidden_per_pass], axis=1)


def controlled_generate(
    model: TransformerLM,
    contexts,
    npi: Callable[[Tensor], Tensor],
    config: ControlConfig,
    sampler: SamplerConfig = SamplerConfig(),
):
    """Windowed controlled generation for a [B, L] batch (or one [L] context).

    1. w unperturbed passes collect S; 2. one NPI call maps S to D;
    3. w passes from the same context with D injected produce T^D_out and S'.
    Returns (tokens [B, w], S [B, w, m, c, d], S' [B, w, m, c, d]) as arrays.
    """
    config.check_model(model)
    ctx = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    base_tokens, hidden = generate_batch(model, ctx, config.window, sampler, taps=config.taps)
    S = collect_sequence(hidden, config)
    with no_grad():
        D = npi(Tensor(S, dtype=S.dtype))
        forced = base_tokens if config.teacher_forcing else None
        toks, S_prime = controlled_rollout(model, ctx, D, config, sampler, forced)
    return toks, S, S_prime.data
