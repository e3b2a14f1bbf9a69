from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from npi.autodiff.tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-3, indices=None) -> np.ndarray:
    """Central finite differences of a scalar fn() w.r.t. x.data (in place perturbation).

    ``indices`` restricts the probe to a list of flat positions; the rest stay 0.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3) -> list[float]:
    """Relative error between backward() and finite differences for each input.

    The inputs should be float64 leaves with requires_grad set.
    """
    for x in inputs:
        x.zero_grad()
    backward(fn())
    errors = []
    for x in inputs:
        analytic = x.grad.copy()
        numeric = numerical_grad(fn, x, h)
        errors.append(rel_error(analytic, numeric))
    return errors


def _leaf(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def op_suite(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per differentiable op on small float64 inputs."""
    from npi.autodiff import tensor as T

    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    w = _leaf(rng, 4, 5)
    g, bias = _leaf(rng, 4), _leaf(rng, 4)
    x3 = _leaf(rng, 2, 3, 4)
    table = _leaf(rng, 6, 4)
    ids = rng.integers(0, 6, size=(2, 3))
    cls = rng.integers(0, 4, size=3)
    t01 = rng.uniform(size=(3, 4))
    cases = {
        "add": (lambda: T.sum_all(T.mul(T.add(a, b), b)), [a, b]),
        "matmul": (lambda: T.sum_all(T.tanh(T.matmul(a, w))), [a, w]),
        "batched_matmul": (lambda: T.sum_all(T.matmul(x3, T.transpose(x3, (0, 2, 1)))), [x3]),
        "layer_norm": (lambda: T.sum_all(T.mul(T.layer_norm(a, g, bias), b)), [a, g, bias]),
        "softmax": (lambda: T.sum_all(T.mul(T.softmax_rows(a), b)), [a]),
        "gelu": (lambda: T.sum_all(T.mul(T.gelu(a), b)), [a]),
        "sigmoid": (lambda: T.sum_all(T.mul(T.sigmoid(a), b)), [a]),
        "embedding": (lambda: T.sum_all(T.tanh(T.embedding(table, ids))), [table]),
        "cross_entropy": (lambda: T.cross_entropy(a, cls), [a]),
        "bce_logits": (lambda: T.bce_logits(a, t01), [a]),
        "mse": (lambda: T.mse(a, b.data), [a]),
        "mul_axis": (lambda: T.sum_all(T.tanh(T.mul_axis(x3, g, axis=2))), [x3, g]),
    }
    return {name: max(check_gradients(fn, inputs)) for name, (fn, inputs) in cases.items()}
