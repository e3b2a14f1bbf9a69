import numpy as np
import pytest

from npi.autodiff import tensor as T
from npi.models import (
    ContentClassifier,
    Discriminator,
    NPINetwork,
    ShapeConfigError,
    init_network,
    load_network,
    parameter_count,
    save_network,
)

SHAPE = (3, 2, 8, 4)


@pytest.mark.parametrize("kind", ["npi", "classifier", "discriminator"])
@pytest.mark.parametrize("hidden", [(16,), (12, 10)])
def test_parameter_count_closed_form(kind, hidden):
    net = init_network(kind, SHAPE, seed=0, hidden=hidden)
    assert net.num_parameters() == parameter_count(SHAPE, hidden, kind)


def test_fresh_npi_outputs_zero(rng):
    X = NPINetwork(SHAPE, hidden=(16,), seed=1)
    D = X(T.Tensor(rng.normal(size=(5, *SHAPE)).astype(np.float32)))
    assert D.shape == (5, *SHAPE) and not D.data.any()


def test_npi_output_bounded_by_gain(rng):
    X = NPINetwork(SHAPE, hidden=(16,), seed=1, zero_final=False, gain_init=0.3)
    D = X(T.Tensor(rng.normal(size=(4, *SHAPE)).astype(np.float32)))
    assert np.abs(D.data).max() <= 0.3 + 1e-6 and np.abs(D.data).max() > 0


def test_probabilities_in_open_interval(rng):
    Y = ContentClassifier(SHAPE, hidden=(16,), seed=2)
    p = Y.predict(rng.normal(scale=100, size=(6, *SHAPE)).astype(np.float32))
    assert p.shape == (6,) and (p > 0).all() and (p < 1).all()


def test_shape_errors(rng):
    Z = Discriminator(SHAPE, hidden=(8,), seed=0)
    with pytest.raises(ShapeConfigError):
        Z(T.Tensor(np.zeros((2, 3, 2, 8, 5), np.float32)))
    with pytest.raises(ShapeConfigError):
        Z(T.Tensor(np.zeros(SHAPE, np.float32)))
    with pytest.raises(ValueError):
        init_network("teacher", SHAPE, 0)


def test_seeded_init_is_reproducible():
    a = init_network("classifier", SHAPE, seed=7, hidden=(8,)).state_dict()
    b = init_network("classifier", SHAPE, seed=7, hidden=(8,)).state_dict()
    c = init_network("classifier", SHAPE, seed=8, hidden=(8,)).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_input_standardization(rng):
    Y = ContentClassifier(SHAPE, hidden=(8,), seed=0)
    S = rng.normal(loc=5.0, scale=3.0, size=(200, *SHAPE)).astype(np.float32)
    Y.fit_input_stats(S)
    x = T.feature_affine(T.Tensor(S.reshape(200, -1)), Y.in_mean, Y.in_scale).data
    assert np.abs(x.mean(axis=0)).max() < 1e-3
    assert np.abs(x.std(axis=0) - 1).max() < 1e-3


def test_save_load_round_trip(tmp_path, rng):
    X = NPINetwork(SHAPE, hidden=(8,), seed=3, zero_final=False)
    X.fit_input_stats(rng.normal(size=(10, *SHAPE)))
    p = tmp_path / "x.npiw"
    save_network(X, p)
    X2 = load_network(NPINetwork(SHAPE, hidden=(8,), seed=99), p)
    S = T.Tensor(rng.normal(size=(2, *SHAPE)).astype(np.float32))
    assert np.array_equal(X(S).data, X2(S).data)
    with pytest.raises(ValueError):
        load_network(ContentClassifier(SHAPE, hidden=(8,)), p)


def test_gradients_flow_to_all_parameters(rng):
    X = NPINetwork(SHAPE, hidden=(8,), seed=0, zero_final=False)
    T.backward(T.sum_all(X(T.Tensor(rng.normal(size=(2, *SHAPE)).astype(np.float32)))))
    assert all(p.grad is not None and np.abs(p.grad).sum() > 0 for p in X.parameters())
