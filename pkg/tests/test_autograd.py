import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import logsumexp as sp_logsumexp

from cleft.autograd import Variable, backward, finite_diff_check, is_grad_enabled, no_grad, ops
from cleft.errors import ContractError, DimensionError

from gradcases import OP_CASES


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_op_gradients_match_central_differences(name, seed):
    make, tol = OP_CASES[name]
    f, x = make(seed)
    assert x.dtype == np.float32
    assert finite_diff_check(f, x) <= tol


def test_half_squared_norm_is_exact():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert finite_diff_check(lambda v: ops.scale(ops.sum(v * v), 0.5), x) <= 1e-6


def test_native_precision_differences_are_available():
    # at float64 the differences are accurate enough without promotion
    x = np.random.default_rng(1).normal(size=(4, 5))
    assert finite_diff_check(lambda v: ops.sum(ops.gelu(v)), x, eps=1e-5, fd_dtype=None) <= 1e-6


def test_square_gradient():
    x = Variable(3.0, requires_grad=True)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_sum_matmul_gradient_pattern():
    rng = np.random.default_rng(2)
    A = Variable(rng.normal(size=(3, 4)), requires_grad=True)
    B = Variable(rng.normal(size=(4, 2)), requires_grad=True)
    backward(ops.sum(A @ B))
    np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B.value.T, rtol=1e-6)
    np.testing.assert_allclose(B.grad, A.value.T @ np.ones((3, 2)), rtol=1e-6)


def test_detached_leaf_keeps_zero_grad():
    x = Variable(np.ones(3), requires_grad=True)
    c = Variable(np.full(3, 2.0), requires_grad=False)
    backward(ops.sum(x * c))
    np.testing.assert_array_equal(c.grad, np.zeros(3))
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0))


def test_repeated_backward_accumulates_until_zeroed():
    x = Variable(np.array([1.0, -2.0]), requires_grad=True)
    backward(ops.sum(x * x))
    backward(ops.sum(x * x))
    np.testing.assert_allclose(x.grad, 4 * x.value)
    x.zero_grad()
    backward(ops.sum(x * x))
    np.testing.assert_allclose(x.grad, 2 * x.value)


def test_non_scalar_loss_is_rejected():
    x = Variable(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_diamond_graph_sums_both_paths():
    # y = x^2 feeds two branches: z = exp(y) + 3y, dz/dx = 2x (exp(x^2) + 3)
    x0 = np.array([0.3, -0.7, 1.1])
    x = Variable(x0, requires_grad=True)
    y = x * x
    backward(ops.sum(ops.exp(y) + ops.scale(y, 3.0)))
    np.testing.assert_allclose(x.grad, 2 * x0 * (np.exp(x0 ** 2) + 3), rtol=1e-12)
    assert finite_diff_check(lambda v: ops.sum(ops.exp(v * v) + ops.scale(v * v, 3.0)), x0) <= 1e-6


def test_shared_leaf_used_twice_in_one_op():
    x = Variable(np.array([2.0, 3.0]), requires_grad=True)
    backward(ops.sum(ops.mul(x, x)))
    np.testing.assert_allclose(x.grad, [4.0, 6.0])


def test_no_grad_records_nothing():
    x = Variable(np.ones(2), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2.0
    assert is_grad_enabled()
    assert not y.requires_grad


def test_integer_input_becomes_float32():
    assert Variable([1, 2, 3]).dtype == np.float32
    assert Variable(np.zeros(2, dtype=np.float64)).dtype == np.float64


# --- forward oracles ---------------------------------------------------------------

def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 41)
    expect = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(ops.gelu(x).value, expect, rtol=1e-12, atol=1e-15)


def test_layer_norm_uses_biased_variance():
    x = np.random.default_rng(3).normal(size=(4, 6))
    g, b = np.full(6, 2.0), np.full(6, 0.5)
    expect = 2.0 * (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) + 0.5
    np.testing.assert_allclose(ops.layer_norm(x, g, b).value, expect, rtol=1e-10)


def test_logsumexp_matches_scipy_and_is_stable():
    x = np.array([[1000.0, 1000.0], [-5.0, 3.0]])
    np.testing.assert_allclose(ops.logsumexp(x, axis=-1).value, sp_logsumexp(x, axis=-1))


def test_l2_normalize_guards_zero_rows():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    out = ops.l2_normalize(x).value
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0]])


def test_cross_entropy_value_and_target_check():
    logits = np.log(np.array([[0.5, 0.25, 0.25], [0.1, 0.1, 0.8]]))
    loss = ops.cross_entropy(logits, np.array([0, 2])).value
    assert loss == pytest.approx(-(math.log(0.5) + math.log(0.8)) / 2)
    with pytest.raises(IndexError):
        ops.cross_entropy(logits, np.array([0, 3]))


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(IndexError):
        ops.embedding(np.zeros((4, 2)), np.array([4]))


def test_embedding_scatter_adds_repeated_rows():
    table = Variable(np.zeros((3, 2)), requires_grad=True)
    backward(ops.sum(ops.embedding(table, np.array([1, 1, 2]))))
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])


def test_shape_errors():
    with pytest.raises(DimensionError):
        ops.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(DimensionError):
        ops.matmul(np.ones(3), np.ones((3, 2)))
    with pytest.raises(DimensionError):
        ops.diagonal(np.ones((2, 3)))


finite = st.floats(-30, 30, allow_nan=False, width=32)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite),
       st.floats(-50, 50, width=32))
def test_softmax_rows_sum_to_one_and_ignore_shifts(x, c):
    p = ops.softmax(x, axis=-1).value
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    shifted = ops.softmax(x + np.float32(c), axis=-1).value
    np.testing.assert_allclose(shifted, p, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_ops_are_deterministic(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5)).astype(np.float32)
    w = rng.normal(size=(5, 4)).astype(np.float32)

    def run():
        v = Variable(x, requires_grad=True)
        y = ops.sum(ops.gelu(ops.layer_norm(v @ w, np.ones(4, np.float32), np.zeros(4, np.float32))))
        backward(y)
        return y.value.tobytes(), v.grad.tobytes()

    assert run() == run()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=1, max_size=3), st.data())
def test_broadcast_gradients_reduce_to_operand_shape(shape, data):
    shape = tuple(shape)
    small = tuple(data.draw(st.sampled_from([1, n])) for n in shape)
    a = Variable(np.ones(shape), requires_grad=True)
    b = Variable(np.ones(small), requires_grad=True)
    backward(ops.sum(a * b))
    assert b.grad.shape == small
    np.testing.assert_allclose(b.grad.sum(), np.prod(shape))
