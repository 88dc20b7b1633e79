import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, gelu_scalar, layer_norm_row, matmul_loops, softmax_row
from vipformer import tensor as T
from vipformer.errors import ContractError, ParameterError, ShapeError
from vipformer.rng import RngStream
from vipformer.tensor import Tensor, grad_check

finite = st.floats(-5, 5, allow_nan=False, width=64)


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


# -- matmul ---------------------------------------------------------------------

def test_matmul_identity_and_hand_case():
    a = np.array([[2.0, -1.0], [0.5, 3.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_matches_triple_loop():
    a, b = rand(3, 4, seed=1), rand(4, 2, seed=2)
    assert np.abs(T.matmul(Tensor(a), Tensor(b)).data - matmul_loops(a, b)).max() < 1e-12


def test_matmul_batched_broadcast():
    a, b = rand(2, 3, 4), rand(4, 5)
    out = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(2):
        assert np.abs(out[i] - matmul_loops(a[i], b)).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


# -- softmax / logsumexp ----------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(T.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    big = T.softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and abs(big[0] - 1) < 1e-6 and big[1] < 1e-6
    # frozen from the scalar oracle
    ref = [0.09003057317038046, 0.24472847105479764, 0.6652409557748218]
    assert np.abs(T.softmax_lastdim(Tensor([1.0, 2.0, 3.0])).data - ref).max() < 1e-15
    assert np.abs(np.array(softmax_row([1.0, 2.0, 3.0])) - ref).max() < 1e-15


def test_softmax_empty_is_shape_error():
    with pytest.raises(ShapeError):
        T.softmax_lastdim(Tensor(np.zeros((2, 0))))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax_lastdim(Tensor(x)).data
    assert np.all(s >= 0)
    assert np.abs(s.sum(-1) - 1).max() < 1e-6


def test_logsumexp_handles_negative_infinity():
    x = Tensor([[-np.inf, 0.0, 0.0], [1.0, 2.0, 3.0]])
    out = T.logsumexp_lastdim(x).data
    assert out[0] == pytest.approx(math.log(2))
    assert out[1] == pytest.approx(math.log(math.e + math.e ** 2 + math.e ** 3))


# -- layer norm -----------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(T.layer_norm(Tensor(np.full((2, 4), 3.7)), one, zero).data, np.zeros((2, 4)))
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
    assert np.abs(out - [1.0, -1.0]).max() < 1e-9
    x, g, b = rand(3, 5), rand(5, seed=3), rand(5, seed=4)
    ref = np.array([layer_norm_row(list(r), list(g), list(b), 1e-5) for r in x])
    assert np.abs(T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data - ref).max() < 1e-12


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ParameterError):
        T.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 9)), elements=finite))
def test_layer_norm_unit_affine_statistics(x):
    d = x.shape[-1]
    out = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    for row, src in zip(out, x):
        if np.ptp(src) < 1e-3:
            continue  # eps dominates near-constant tokens
        assert abs(row.mean()) < 1e-6
        var = src.var()
        assert abs(row.var() - var / (var + 1e-5)) < 1e-4


# -- pointwise ------------------------------------------------------------------

def test_relu_and_gelu_values():
    assert T.pointwise(Tensor([-3.0, 3.0]), "relu").data.tolist() == [0.0, 3.0]
    assert T.pointwise(Tensor([0.0]), "gelu").data[0] == 0.0
    # frozen from the erf oracle: 1 * Phi(1)
    assert abs(T.gelu(Tensor([1.0])).data[0] - 0.8413447460685429) < 1e-15
    xs = np.linspace(-6, 6, 41)
    assert np.abs(T.gelu(Tensor(xs)).data - [gelu_scalar(v) for v in xs]).max() < 1e-14
    with pytest.raises(ParameterError):
        T.pointwise(Tensor([1.0]), "tanh")


def test_dropout_semantics():
    x = Tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.3, None, train=False) is x
    out = T.dropout(x, 0.3, RngStream(0), train=True).data
    assert set(np.unique(out)) <= {0.0, np.float64(1 / 0.7)}
    assert abs((out == 0).mean() - 0.3) < 0.02
    again = T.dropout(x, 0.3, RngStream(0), train=True).data
    assert np.array_equal(out, again)
    with pytest.raises(ContractError):
        T.dropout(x, 0.3, None, train=True)


# -- backward -------------------------------------------------------------------

def test_backward_simple_sums():
    w = Tensor(rand(2, 3), requires_grad=True)
    w.sum().backward()
    assert np.array_equal(w.grad, np.ones((2, 3)))
    v = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (v * v).sum().backward()
    assert v.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_accumulates_until_zeroed():
    v = Tensor([1.0, 2.0], requires_grad=True)
    (v * v).sum().backward()
    (v * v).sum().backward()
    assert v.grad.tolist() == [4.0, 8.0]
    v.zero_grad()
    assert v.grad is None


def test_backward_contract_errors():
    v = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (v * 2).backward()
    with pytest.raises(ContractError):
        Tensor([1.0]).sum().backward()
    with T.no_grad():
        detached = (v * v).sum()
    with pytest.raises(ContractError):
        detached.backward()


def test_backward_keeps_parameter_precision():
    w = Tensor(rand(3, 4).astype(np.float32), requires_grad=True)
    loss = T.astype(T.linear(Tensor(np.ones((2, 3), np.float32)), w), np.float64).sum() * 0.5
    loss.backward()
    assert w.grad.dtype == np.float32


# -- gradient checks over every differentiable operation ---------------------------

def _leaf(*shape, seed=0, shift=0.0):
    return Tensor(rand(*shape, seed=seed) + shift, requires_grad=True)


OPS = {
    "add": lambda a, b, c: (T.add(a, b) * c).sum(),
    "sub": lambda a, b, c: (T.sub(a, b) * c).sum(),
    "mul": lambda a, b, c: (T.mul(a, b) * c).sum(),
    "div": lambda a, b, c: (T.div(a, T.exp(b)) * c).sum(),
    "power": lambda a, b, c: (T.power(T.exp(a), 3.0) * c).sum(),
    "exp": lambda a, b, c: (T.exp(a) * c).sum(),
    "log": lambda a, b, c: (T.log(T.exp(a) + 1.0) * c).sum(),
    "sqrt": lambda a, b, c: (T.sqrt(a * a + 1.0) * c).sum(),
    "gelu": lambda a, b, c: (T.gelu(a) * c).sum(),
    "relu": lambda a, b, c: (T.relu(a) * c).sum(),
    "matmul": lambda a, b, c: (T.matmul(a, b.T) * Tensor(np.ones((3, 3)))).sum(),
    "linear": lambda a, b, c: (T.linear(a, b.T, c[0, :3]) ** 2).sum(),
    "reshape": lambda a, b, c: (T.reshape(a, (4, 3)) * T.reshape(c, (4, 3))).sum(),
    "transpose": lambda a, b, c: (T.transpose(a) * T.transpose(c)).sum(),
    "swapaxes": lambda a, b, c: (T.swapaxes(a, 0, 1) * T.swapaxes(b, 0, 1)).sum(),
    "getitem": lambda a, b, c: (a[1:, ::2] * b[:2, 1:3]).sum(),
    "concat": lambda a, b, c: (T.concat([a, b], axis=1) * T.concat([c, c], axis=1)).sum(),
    "sum": lambda a, b, c: (T.tsum(a * b, axis=1) ** 2).sum(),
    "mean": lambda a, b, c: (T.mean(a * b, axis=0) ** 2).sum(),
    "max": lambda a, b, c: (T.tmax(a * c, axis=1) ** 2).sum(),
    "softmax": lambda a, b, c: (T.softmax_lastdim(a) * c).sum(),
    "logsumexp": lambda a, b, c: (T.logsumexp_lastdim(a) ** 2).sum(),
    "layer_norm": lambda a, b, c: (T.layer_norm(a, b[0], c[0]) * b).sum(),
    "cross_entropy": lambda a, b, c: T.cross_entropy(a * b, np.array([0, 3, 1])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_operation_gradient_matches_finite_differences(name):
    a, b, c = _leaf(3, 4, seed=1), _leaf(3, 4, seed=2), _leaf(3, 4, seed=3, shift=0.5)
    err = grad_check(lambda _: OPS[name](a, b, c), [a, b, c], h=1e-6)
    assert err < 1e-4


def test_batch_norm_gradient_and_running_stats():
    x = _leaf(6, 4, seed=5)
    g, b = _leaf(4, seed=6, shift=1.0), _leaf(4, seed=7)
    rm, rv = np.zeros(4), np.ones(4)
    w = Tensor(rand(6, 4, seed=8))
    err = grad_check(lambda _: (T.batch_norm(x, g, b, rm.copy(), rv.copy(), True) * w).sum(), [x, g, b])
    assert err < 1e-4
    rm, rv = np.zeros(4), np.ones(4)
    T.batch_norm(Tensor(x.data), Tensor(g.data), Tensor(b.data), rm, rv, True, momentum=0.1)
    assert np.allclose(rm, 0.1 * x.data.mean(0))
    assert np.allclose(rv, 0.9 + 0.1 * x.data.var(0, ddof=1))


def test_batch_norm_identical_rows_give_beta():
    x = Tensor(np.tile([1.0, -2.0, 3.0], (5, 1)))
    beta = Tensor([0.25, 0.5, 0.75])
    out = T.batch_norm(x, Tensor(np.ones(3)), beta, np.zeros(3), np.ones(3), True).data
    assert np.all(np.isfinite(out)) and np.allclose(out, beta.data)


def test_grad_check_reports_error_and_rejects_vector_output():
    x = Tensor(rand(5), requires_grad=True)
    assert grad_check(lambda _: (x * x).sum(), x) < 1e-8
    with pytest.raises(ContractError):
        grad_check(lambda _: x * x, x)


def test_backward_agrees_with_independent_difference():
    x0 = rand(4, seed=9)
    s = np.sin(x0)
    y = Tensor(x0.copy(), requires_grad=True)
    (T.exp(y) * Tensor(s)).sum().backward()
    numeric = central_difference(lambda v: float(np.sum(np.exp(v) * s)), x0)
    assert np.abs(y.grad - numeric).max() < 1e-7


def test_item_and_float_coercion():
    assert Tensor([[2.5]]).item() == 2.5
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()
    assert Tensor([1, 2]).dtype == np.float64
