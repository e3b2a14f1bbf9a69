import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from npi.autodiff import tensor as T
from npi.autodiff.gradcheck import check_gradients, numerical_grad, op_suite
from npi.autodiff.tensor import ContractError, DimensionError, DomainError, NonFiniteError, Tape, Tensor, backward


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=np.float64)


finite = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=st.floats(-5, 5))


def test_tensor_invariants():
    t = Tensor(np.arange(6).reshape(2, 3), requires_grad=True)
    assert t.dtype == np.float32
    assert t.size == 6 and t.grad.shape == t.shape
    assert Tensor([1.0]).grad is None


def test_matmul_identity_and_hand_case(rng):
    M = rng.normal(size=(3, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(3), dtype=np.float64), Tensor(M, dtype=np.float64)).data, M)
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
    assert out.data.tolist() == [[2], [4]]


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_4x5x3(rng):
    a, b = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 3)))
    errs = check_gradients(lambda: T.sum_all(T.tanh(T.matmul(a, b))), [a, b])
    assert max(errs) <= 1e-3


def test_matmul_backward_formula(rng):
    a, b = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 3)))
    g = rng.normal(size=(4, 3))
    backward(T.sum_all(T.mul(T.matmul(a, b), Tensor(g, dtype=np.float64))))
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


@given(finite)
@settings(max_examples=30, deadline=None)
def test_elementwise_identities(x):
    t = Tensor(x, dtype=np.float64)
    assert np.array_equal(T.elementwise(t, Tensor(np.zeros_like(x), dtype=np.float64), "add").data, x)
    assert np.array_equal(T.elementwise(t, Tensor(np.ones_like(x), dtype=np.float64), "mul").data, x)


def test_elementwise_no_broadcast():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(ValueError):
        T.elementwise(Tensor([1.0]), Tensor([1.0]), "pow")


def test_add_gradient_2x3(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 3)))
    assert max(check_gradients(lambda: T.sum_all(T.mul(T.add(a, b), T.add(a, b))), [a, b])) <= 1e-3


def test_activation_values():
    assert T.activation(Tensor([0.0]), "sigmoid").data[0] == 0.5
    np.testing.assert_array_equal(T.softmax_rows(Tensor(np.zeros((1, 4)))).data, [[0.25] * 4])
    assert T.activation(Tensor([-1.0, 2.0]), "relu").data.tolist() == [0.0, 2.0]
    np.testing.assert_allclose(T.activation(Tensor([0.5]), "tanh").data, np.tanh(0.5), rtol=1e-6)
    with pytest.raises(ValueError):
        T.activation(Tensor([0.0]), "swish")


def test_gelu_matches_tanh_formula(rng):
    x = rng.normal(size=50)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(T.gelu(Tensor(x, dtype=np.float64)).data, ref, rtol=1e-12)


def test_layer_norm_gradient_3x8(rng):
    x, g, b = leaf(rng.normal(size=(3, 8))), leaf(rng.normal(size=8)), leaf(rng.normal(size=8))
    w = Tensor(rng.normal(size=(3, 8)), dtype=np.float64)
    assert max(check_gradients(lambda: T.sum_all(T.mul(T.layer_norm(x, g, b), w)), [x, g, b])) <= 1e-3


def test_layer_norm_rows_standardized(rng):
    x = Tensor(rng.normal(3, 2, size=(5, 16)), dtype=np.float64)
    y = T.layer_norm(x, Tensor(np.ones(16), dtype=np.float64), Tensor(np.zeros(16), dtype=np.float64)).data
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=1), 1, atol=1e-5)


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=st.floats(-30, 30, width=32)))
@settings(max_examples=40, deadline=None)
def test_softmax_rows_sum_to_one(x):
    y = T.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-5)
    assert (y >= 0).all()


def test_loss_values():
    assert abs(T.bce(Tensor([0.5]), 1.0).item() - np.log(2)) < 1e-6
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert T.mse(x, x.data).item() == 0.0
    logits = Tensor(np.zeros((2, 4)))
    assert abs(T.cross_entropy(logits, [0, 3]).item() - np.log(4)) < 1e-6
    with pytest.raises(ValueError):
        T.loss(x, x.data, "hinge")


def test_bce_gradient_analytic():
    # d/dp of -ln p at p=0.8, mean over N=4 entries
    p = Tensor(np.full(4, 0.8), requires_grad=True, dtype=np.float64)
    backward(T.bce(p, 1.0))
    np.testing.assert_allclose(p.grad, -1 / 0.8 / 4)


def test_bce_domain_errors():
    with pytest.raises(DomainError):
        T.bce(Tensor([1.2]), 1.0)
    with pytest.raises(DomainError):
        T.bce(Tensor([0.5]), 2.0)
    with pytest.raises(DomainError):
        T.bce_logits(Tensor([0.5]), -1.0)


def test_bce_clamps_at_saturation():
    assert np.isfinite(T.bce(Tensor([0.0, 1.0]), [1.0, 0.0]).item())


@given(st.lists(st.floats(-40, 40), min_size=1, max_size=8), st.floats(0, 1))
@settings(max_examples=40, deadline=None)
def test_bce_logits_matches_probability_form(z, t):
    z = np.array(z)
    # -ln sigmoid(z) = ln(1 + e^-z), -ln(1 - sigmoid(z)) = ln(1 + e^z)
    ref = (t * np.logaddexp(0, -z) + (1 - t) * np.logaddexp(0, z)).mean()
    got = T.bce_logits(Tensor(z, dtype=np.float64), t).item()
    assert abs(got - ref) <= 1e-9 * max(1.0, abs(ref))


def test_loss_gradients(rng):
    a = leaf(rng.normal(size=(3, 4)))
    y = rng.normal(size=(3, 4))
    assert max(check_gradients(lambda: T.mse(a, y), [a])) <= 1e-3
    assert max(check_gradients(lambda: T.cross_entropy(a, [0, 1, 3]), [a])) <= 1e-3
    t = rng.uniform(size=(3, 4)).round(1)
    assert max(check_gradients(lambda: T.bce_logits(a, t), [a])) <= 1e-3
    p = leaf(rng.uniform(0.1, 0.9, size=(3, 4)))
    assert max(check_gradients(lambda: T.bce(p, (y > 0).astype(float)), [p])) <= 1e-3


def test_backward_sum_gives_ones(rng):
    x = leaf(rng.normal(size=(2, 3)))
    backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_mse_of_linear_map(rng):
    W, x, y = leaf(rng.normal(size=(4, 3))), rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    assert max(check_gradients(lambda: T.mse(T.matmul(W, Tensor(x, dtype=np.float64)), y), [W])) <= 1e-3


def test_backward_accumulates(rng):
    x = leaf(rng.normal(size=(2, 3)))
    c = Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
    backward(T.sum_all(T.mul(x, c)))
    first = x.grad.copy()
    backward(T.sum_all(T.mul(x, c)))
    assert np.array_equal(x.grad, 2 * first)


def test_backward_contract_errors():
    with pytest.raises(ContractError):
        backward(leaf(np.ones(3)))
    with pytest.raises(ContractError):
        backward(T.sum_all(Tensor(np.ones(3))))


def test_tape_order_and_clear(rng):
    x = leaf(rng.normal(size=3))
    h = T.tanh(x)
    out = T.sum_all(T.mul(h, h))
    tape = Tape(out)
    assert len(tape) == 3
    assert [n._seq for n in tape.nodes] == sorted(n._seq for n in tape.nodes)
    tape.clear()
    assert len(tape) == 0 and out._parents == () and out._backward is None


def test_tape_visits_each_op_once(rng):
    # a diamond graph: x feeds two branches joined again
    x = leaf(rng.normal(size=3))
    a = T.tanh(x)
    out = T.sum_all(T.add(T.mul(a, a), a))
    calls = []
    for node in Tape(out).nodes:
        fn = node._backward
        node._backward = lambda g, fn=fn, node=node: calls.append(id(node)) or fn(g)
    backward(out)
    assert len(calls) == len(set(calls)) == 4
    np.testing.assert_allclose(x.grad, (2 * a.data + 1) * (1 - a.data**2))


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.scale(Tensor([1e30]), 1e30)


def test_no_grad_records_nothing(rng):
    x = leaf(rng.normal(size=3))
    with T.no_grad():
        y = T.tanh(x)
    assert not y.requires_grad and y.is_leaf


def test_shape_ops_gradients(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    w = Tensor(rng.normal(size=(4, 3, 2)), dtype=np.float64)
    assert max(check_gradients(lambda: T.sum_all(T.mul(T.transpose(x, (2, 1, 0)), w)), [x])) <= 1e-3
    v = Tensor(rng.normal(size=(2, 5, 4)), dtype=np.float64)
    assert max(check_gradients(lambda: T.sum_all(T.mul(T.pad_rows(x, 5, axis=1), v)), [x])) <= 1e-3
    assert max(check_gradients(lambda: T.sum_all(T.tanh(T.concat([x, x], axis=1))), [x])) <= 1e-3
    assert max(check_gradients(lambda: T.sum_all(T.tanh(T.stack([x, x], axis=0))), [x])) <= 1e-3
    assert max(check_gradients(lambda: T.sum_all(T.tanh(x[:, 1:, ::2])), [x])) <= 1e-3
    assert max(check_gradients(lambda: T.sum_all(T.tanh(T.sum_axis(x, 1))), [x])) <= 1e-3
    assert max(check_gradients(lambda: T.mean_all(T.mul(x, x)), [x])) <= 1e-3


def test_causal_mask_and_attention_gradient(rng):
    x = leaf(rng.normal(size=(2, 4, 4)))
    w = Tensor(rng.normal(size=(2, 4, 4)), dtype=np.float64)
    y = T.softmax_rows(T.causal_mask(x)).data
    assert np.allclose(np.triu(y[0], 1), 0)
    assert max(check_gradients(lambda: T.sum_all(T.mul(T.softmax_rows(T.causal_mask(x)), w)), [x])) <= 1e-3


def test_embedding_gradient_and_range(rng):
    table = leaf(rng.normal(size=(5, 3)))
    ids = np.array([[0, 4, 4], [1, 0, 2]])
    assert max(check_gradients(lambda: T.sum_all(T.tanh(T.embedding(table, ids))), [table])) <= 1e-3
    with pytest.raises(DimensionError):
        T.embedding(table, [5])


def test_op_suite_all_within_tolerance():
    errors = op_suite(seed=3)
    assert max(errors.values()) <= 1e-3, errors


def test_numerical_grad_of_quadratic():
    x = leaf([1.0, -2.0])
    np.testing.assert_allclose(numerical_grad(lambda: T.sum_all(T.mul(x, x)), x), [2.0, -4.0], rtol=1e-8)


def test_seeded_replay_bit_identical():
    def run():
        r = np.random.default_rng(5)
        a, b = Tensor(r.normal(size=(8, 8))), Tensor(r.normal(size=(8, 8)))
        return T.softmax_rows(T.gelu(T.matmul(a, b))).data

    assert np.array_equal(run(), run())
