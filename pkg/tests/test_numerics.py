import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ranfm.numerics import (ComputationGraph, DimensionError, GraphError, NumericError, Tensor, activation,
                            backward, concat, finite_difference_check, gelu, get_dtype, gradient_check,
                            layer_norm, log_softmax_rows, matmul, no_grad, precision, relu, softmax_rows)


def t64(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# -- matmul -----------------------------------------------------------------

def test_matmul_hand_value():
    out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_identity_and_zero(rng):
    b = rng.standard_normal((2, 5))
    np.testing.assert_allclose(matmul(Tensor(np.eye(2)), Tensor(b)).data, b.astype(np.float32))
    assert not matmul(Tensor(np.zeros((3, 2))), Tensor(b)).data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", range(5))
def test_matmul_associative(seed):
    r = np.random.default_rng(seed)
    a, b, c = (t64(r.standard_normal(s), False) for s in ((3, 4), (4, 5), (5, 2)))
    left = matmul(matmul(a, b), c).data
    right = matmul(a, matmul(b, c)).data
    assert np.max(np.abs(left - right) / np.maximum(1, np.abs(left))) < 1e-5


# -- softmax ----------------------------------------------------------------

def test_softmax_closed_form():
    out = softmax_rows(t64([[0.0, math.log(3.0)]], False)).data
    np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-12)


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(softmax_rows(Tensor(np.full((2, 4), 7.0))).data, 0.25)
    out = softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-30)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        softmax_rows(Tensor([[0.0, np.nan]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


# -- layer norm, activations -------------------------------------------------

def test_layer_norm_hand_values():
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(layer_norm(t64([[1.0, 3.0]], False), t64(np.ones(2), False),
                                          t64(np.zeros(2), False), eps=1e-12).data, [[-1.0, 1.0]], atol=1e-9)
    assert not layer_norm(Tensor([[5.0, 5.0]]), ones, zeros).data.any()
    out = layer_norm(Tensor([[1.0, 9.0], [2.0, -4.0]]), Tensor(np.zeros(2)), Tensor([0.5, -2.0])).data
    np.testing.assert_allclose(out, [[0.5, -2.0], [0.5, -2.0]])


def test_layer_norm_width_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_activations():
    assert relu(Tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]
    assert gelu(Tensor([0.0])).data[0] == 0.0
    x = t64([2.0, -2.0])
    backward(relu(x).sum())
    assert x.grad.tolist() == [1.0, 0.0]
    with pytest.raises(ValueError):
        activation(Tensor([1.0]), "swish")


# -- backward ---------------------------------------------------------------

def test_backward_sum_and_square():
    x = t64([1.0, 2.0])
    backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0]
    backward((x * x).sum())
    assert x.grad.tolist() == [2.0, 4.0]


def test_unreachable_leaf_gets_zero_grad():
    x, y = t64([1.0, 2.0]), t64([[3.0]])
    backward(x.sum(), leaves=[x, y])
    assert y.grad.tolist() == [[0.0]]


def test_backward_rejects_non_scalar():
    with pytest.raises(GraphError):
        backward(t64([1.0, 2.0]) * 2.0)


def test_graph_detects_cycle():
    a = t64([1.0])
    b = a * 2.0
    a._parents = (b,)
    with pytest.raises(GraphError, match="cycle"):
        ComputationGraph(b)


def test_graph_order_and_single_visit():
    x = t64([1.0, 2.0])
    y = x * x
    z = (y + y).sum()
    g = ComputationGraph(z)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    assert len(pos) == len(g.nodes)
    for n in g.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_backward_deterministic(rng):
    a = t64(rng.standard_normal((3, 4)))
    w = t64(rng.standard_normal((4, 2)))

    def grads():
        backward(softmax_rows(matmul(a, w)).square().sum(), leaves=[a, w])
        return a.grad.copy(), w.grad.copy()

    g1, g2 = grads(), grads()
    for u, v in zip(g1, g2):
        np.testing.assert_array_equal(u, v)


def test_no_grad_records_nothing():
    x = t64([1.0])
    with no_grad():
        y = x * 3.0
    assert y.is_leaf and not y.requires_grad


def test_precision_switch():
    assert get_dtype() == np.float32
    with precision(64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


# -- finite differences -----------------------------------------------------

def test_fd_linear_and_quadratic():
    assert finite_difference_check(lambda x: x.sum(), t64(np.arange(5.0))) < 1e-10
    assert finite_difference_check(lambda x: (x * x).sum(), t64([1.0, 2.0]), h=1e-5) < 1e-8


def test_fd_rejects_bad_step_and_32_bit():
    with pytest.raises(ValueError):
        finite_difference_check(lambda x: x.sum(), t64([1.0]), h=0.0)
    with pytest.raises(NumericError):
        finite_difference_check(lambda x: x.sum(), Tensor([1.0], requires_grad=True))


PRIMITIVES = {
    "matmul": lambda a, b: matmul(a, b.T).square().sum(),
    "add_mul_sub": lambda a, b: ((a + b) * a - b * 0.5).sum(),
    "div_neg": lambda a, b: (-(a / 3.0) * b).sum(),
    "softmax": lambda a, b: (softmax_rows(a) * b).sum(),
    "log_softmax": lambda a, b: (log_softmax_rows(a) * b).sum(),
    "layer_norm": lambda a, b: (layer_norm(a, b[0], b[1]) * b[2]).sum(),
    "gelu": lambda a, b: (gelu(a) * b).sum(),
    "relu": lambda a, b: (relu(a) * b).sum(),
    "concat_getitem": lambda a, b: (concat([a, b], axis=0)[1:5, ::2]).square().sum(),
    "reshape_transpose": lambda a, b: (a.reshape(4, 3).transpose(1, 0) * b).sum(),
    "mean_broadcast": lambda a, b: (a.mean(axis=0, keepdims=True) * b).sum() + a.mean(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients(name, seed):
    r = np.random.default_rng(seed)
    a = t64(r.standard_normal((3, 4)))
    if name == "relu":
        a.data[np.abs(a.data) < 1e-3] = 0.5  # keep away from the kink
    b = t64(r.standard_normal((3, 4)))
    assert gradient_check(lambda: PRIMITIVES[name](a, b), [a, b]) < 1e-6
