"""The NPI X, content classifier Y and discriminator Z.

All three are feed-forward networks over a flattened activation sequence
[B, w, m, c_max, d]. Inputs are standardized with stored per-feature
statistics (identity until :meth:`fit_input_stats` is called).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from npi.autodiff import tensor as T
from npi.autodiff.checkpoint import load_weights, save_weights
from npi.autodiff.nn import Linear, Module
from npi.autodiff.tensor import Tensor

KINDS = ("npi", "classifier", "discriminator")
PROB_EPS = 1e-7


class ShapeConfigError(ValueError):
    """Input does not match the network's activation-sequence shape."""


class _FeedForward(Module):
    def __init__(self, seq_shape: Sequence[int], hidden: Sequence[int], n_out: int, seed: int, zero_final: bool, act: str):
        super().__init__()
        self.seq_shape = tuple(int(s) for s in seq_shape)
        self.hidden_sizes = tuple(int(h) for h in hidden)
        self.act = act
        n_in = int(np.prod(self.seq_shape))
        rng = np.random.default_rng(seed)
        sizes = [n_in, *self.hidden_sizes]
        self.layers = Module()
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            self.layers.add_module(str(i), Linear(a, b, rng, std=np.sqrt(2.0 / a)))
        self.out = Linear(sizes[-1], n_out, rng, zero=zero_final)
        self.register_buffer("in_mean", np.zeros(n_in, dtype=np.float32))
        self.register_buffer("in_scale", np.ones(n_in, dtype=np.float32))

    @property
    def n_in(self) -> int:
        return int(np.prod(self.seq_shape))

    def fit_input_stats(self, S: np.ndarray, floor: float = 1e-2) -> None:
        """Standardize inputs with per-feature mean and std of a sample [N, w, m, c, d]."""
        flat = np.asarray(S, dtype=np.float64).reshape(len(S), -1)
        dt = self.in_mean.dtype
        self.register_buffer("in_mean", flat.mean(axis=0).astype(dt))
        self.register_buffer("in_scale", (1.0 / np.maximum(flat.std(axis=0), floor)).astype(dt))

    def _check(self, S: Tensor) -> int:
        if S.data.ndim != len(self.seq_shape) + 1 or S.shape[1:] != self.seq_shape:
            raise ShapeConfigError(f"expected [B, {', '.join(map(str, self.seq_shape))}], got {list(S.shape)}")
        return S.shape[0]

    def trunk(self, S: Tensor) -> Tensor:
        b = self._check(S)
        x = T.reshape(S, (b, -1))
        x = T.feature_affine(x, self.in_mean, self.in_scale)
        for layer in self.layers._children.values():
            x = T.activation(layer(x), self.act)
        return x

    def layer_sizes(self) -> list[tuple[int, int]]:
        sizes = [self.n_in, *self.hidden_sizes]
        return list(zip(sizes, sizes[1:])) + [(sizes[-1], self.out.weight.shape[1])]


class NPINetwork(_FeedForward):
    """Maps an activation sequence S to a same-shaped perturbation sequence D.

    Output = tanh(MLP(S)) scaled by a learnable gain per tap. The final layer
    starts at zero, so a fresh network produces exactly zero perturbation.
    """

    kind = "npi"

    def __init__(
        self,
        seq_shape: Sequence[int],
        hidden: Sequence[int] = (512, 512),
        seed: int = 0,
        zero_final: bool = True,
        gain_init: float = 1.0,
        act: str = "relu",
    ):
        seq_shape = tuple(seq_shape)
        super().__init__(seq_shape, hidden, int(np.prod(seq_shape)), seed, zero_final, act)
        self.gain = Tensor(np.full(seq_shape[1], gain_init), requires_grad=True)

    def __call__(self, S: Tensor) -> Tensor:
        b = self._check(S)
        y = T.tanh(self.out(self.trunk(S)))
        return T.mul_axis(T.reshape(y, (b, *self.seq_shape)), self.gain, axis=2)


class ProbabilityNetwork(_FeedForward):
    """Maps an activation sequence to one probability per example, in (0, 1)."""

    kind = "classifier"

    def __init__(self, seq_shape: Sequence[int], hidden: Sequence[int] = (512, 512), seed: int = 0, zero_final: bool = False, act: str = "relu"):
        super().__init__(seq_shape, hidden, 1, seed, zero_final, act)

    def logits(self, S: Tensor) -> Tensor:
        return T.reshape(self.out(self.trunk(S)), (S.shape[0],))

    def __call__(self, S: Tensor) -> Tensor:
        return T.clip(T.sigmoid(self.logits(S)), PROB_EPS, 1 - PROB_EPS)

    def predict(self, S: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self(Tensor(S, dtype=self.out.weight.dtype)).data


class ContentClassifier(ProbabilityNetwork):
    kind = "classifier"


class Discriminator(ProbabilityNetwork):
    kind = "discriminator"


def init_network(kind: str, seq_shape: Sequence[int], seed: int, hidden: Sequence[int] = (512, 512), **kw) -> _FeedForward:
    """Seeded construction of one of the three network kinds."""
    cls = {"npi": NPINetwork, "classifier": ContentClassifier, "discriminator": Discriminator}.get(kind)
    if cls is None:
        raise ValueError(f"unknown network kind {kind!r}; expected one of {KINDS}")
    return cls(seq_shape, hidden=hidden, seed=seed, **kw)


def parameter_count(seq_shape: Sequence[int], hidden: Sequence[int], kind: str) -> int:
    """Closed-form trainable parameter count for a network of the given kind."""
    n = int(np.prod(seq_shape))
    sizes = [n, *hidden, n if kind == "npi" else 1]
    total = sum(a * b + b for a, b in zip(sizes, sizes[1:]))
    return total + (seq_shape[1] if kind == "npi" else 0)


def save_network(net: _FeedForward, path) -> None:
    """NPIW file whose tensor names carry the network kind, e.g. ``npi.out.weight``."""
    save_weights(path, {f"{net.kind}.{k}": v for k, v in net.state_dict().items()})


def load_network(net: _FeedForward, path) -> _FeedForward:
    raw = load_weights(path)
    prefix = net.kind + "."
    if not all(k.startswith(prefix) for k in raw):
        raise ValueError(f"checkpoint does not hold a {net.kind!r} network")
    net.load_state_dict({k[len(prefix) :]: v for k, v in raw.items()})
    return net
