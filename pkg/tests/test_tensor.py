import numpy as np
import pytest
from hypothesis import given, strategies as st

from ivlab import tensor as T
from ivlab.tensor import GraphError, NumericError, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_square_gradient():
    x = leaf([3.0])
    g = T.backward((x * x).sum(), {"x": x})
    assert g["x"].tolist() == [6.0]


def test_unused_parameter_gets_zero_gradient():
    x, y = leaf([1.0, 2.0]), leaf(np.ones((2, 3)))
    g = T.backward((x * 2.0).sum(), {"x": x, "y": y})
    assert g["y"].shape == (2, 3)
    assert not g["y"].any()


def test_shared_subexpression_accumulates():
    x = leaf([2.0])
    y = x * x
    g = T.backward((y + y).sum(), {"x": x})
    assert g["x"].tolist() == [8.0]


def test_non_scalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        T.backward(x * 2.0, {"x": x})


def test_non_finite_values_raise():
    with pytest.raises(NumericError):
        T.log(leaf([0.0]))
    with pytest.raises(NumericError):
        Tensor(np.array([np.nan]))


def test_graph_is_topological():
    x = leaf([1.0])
    out = T.exp(x) * x + x
    g = T.Graph.from_output(out)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for n in g.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_grad_check_quadratic_and_constant():
    assert T.grad_check(lambda x: (x * x).sum(), [np.array([3.0])], step=1e-4) < 1e-8
    assert T.grad_check(lambda x: (x * 0.0).sum() + 5.0, [np.array([1.0, 2.0])]) == 0.0


UNARY = {
    "exp": T.exp, "tanh": T.tanh, "sigmoid": T.sigmoid, "softplus": T.softplus, "gelu": T.gelu,
    "neg": T.neg, "square": lambda a: T.power(a, 2.0), "softmax": lambda a: T.softmax(a, -1),
    "log_softmax": lambda a: T.log_softmax(a, -1), "mean0": lambda a: T.mean(a, 0, keepdims=True),
    "transpose": lambda a: a.T, "reshape": lambda a: a.reshape(-1), "slice": lambda a: a[1:, ::2],
    "stack": lambda a: T.stack([a, a * 2.0], 1), "concat": lambda a: T.concat([a, T.exp(a)], 0),
    "broadcast": lambda a: T.broadcast_to(a[:1], (4, a.shape[1])),
    "gather": lambda a: T.gather(a, np.array([[2], [0], [2]]), 1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=st.integers(0, 2**16))
def test_unary_gradients(name, seed):
    x = np.random.default_rng(seed).normal(size=(3, 4))
    w = np.random.default_rng(seed + 1).normal(size=UNARY[name](Tensor(x)).shape)
    assert T.grad_check(lambda a: (UNARY[name](a) * w).sum(), [x]) < 1e-6


@given(seed=st.integers(0, 2**16))
def test_positive_domain_gradients(seed):
    x = np.random.default_rng(seed).uniform(0.5, 2.0, size=(3, 2))
    for f in (T.log, T.sqrt, lambda a: T.power(a, -1.5)):
        assert T.grad_check(lambda a: f(a).sum(), [x]) < 1e-6


@given(seed=st.integers(0, 2**16))
def test_binary_broadcast_gradients(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(2, 3, 4)), r.uniform(0.5, 2.0, size=(3, 1))
    for f in (T.add, T.sub, T.mul, T.div):
        assert T.grad_check(lambda x, y: (f(x, y) * x).sum(), [a, b]) < 1e-6


@given(seed=st.integers(0, 2**16))
def test_matmul_batched_gradient(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))
    assert T.grad_check(lambda x, y: T.tanh(x @ y).sum(), [a, b]) < 1e-6


def test_relu_and_maximum_away_from_kink():
    x = np.array([[-1.0, 0.5], [2.0, -0.3]])
    assert T.grad_check(lambda a: (T.relu(a) * a).sum(), [x]) < 1e-8
    assert T.grad_check(lambda a: T.maximum(a, 0.1).sum(), [x]) < 1e-8


def test_power_zero_has_zero_gradient():
    x = leaf([0.0, 2.0])
    g = T.backward(T.power(x, 0.0).sum(), {"x": x})
    assert not g["x"].any()


def test_param_tensors_marks_trainable():
    P = T.param_tensors({"a": np.ones(2), "b": np.ones(2)}, ["a"])
    assert P["a"].requires_grad and not P["b"].requires_grad


def test_cycle_detected():
    a, b = leaf([1.0]), leaf([2.0])
    c = a * b
    a._parents = (c,)
    with pytest.raises(GraphError):
        T.Graph.from_output(c)
