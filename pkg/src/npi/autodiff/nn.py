"""Parameter containers shared by the language model and the NPI networks."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numpy as np

from npi.autodiff import tensor as T
from npi.autodiff.tensor import Tensor


class Module:
    """Holds named parameters and child modules (attribute order is registration order)."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def add_module(self, key: str, module: "Module") -> None:
        setattr(self, key, module)

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        """A saved, non-trainable array."""
        self._buffers[key] = np.asarray(value)
        object.__setattr__(self, key, self._buffers[key])

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, b in self._buffers.items():
            yield prefix + k, b
        for k, child in self._children.items():
            yield from child.named_buffers(prefix + k + ".")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, p in self._params.items():
            yield prefix + k, p
        for k, child in self._children.items():
            yield from child.named_parameters(prefix + k + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.data.copy() for k, p in self.named_parameters()}
        out.update({k: b.copy() for k, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        own.update({k: Tensor(b, dtype=b.dtype) for k, b in self.named_buffers()})
        buffers = dict(self.named_buffers())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            if k in buffers:
                buffers[k][...] = arr
            else:
                p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
            if flag and p.grad is None:
                p.grad = np.zeros_like(p.data)
        return self

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used for float64 gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = np.zeros_like(p.data)
        for mod in self._modules():
            for k, b in list(mod._buffers.items()):
                mod.register_buffer(k, b.astype(dtype))
        return self

    def _modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child._modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


@contextmanager
def frozen(*modules: Module):
    """Treat the modules' parameters as constants inside the block."""
    saved = [[p.requires_grad for p in m.parameters()] for m in modules]
    for m in modules:
        m.requires_grad_(False)
    try:
        yield
    finally:
        for m, flags in zip(modules, saved):
            for p, f in zip(m.parameters(), flags):
                p.requires_grad = f


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False, std: float | None = None):
        super().__init__()
        if zero:
            w = np.zeros((n_in, n_out))
        elif std is not None:
            w = rng.normal(0.0, std, size=(n_in, n_out))
        else:
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)
