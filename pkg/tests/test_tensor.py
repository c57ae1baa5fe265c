import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from artcritic import tensor as T
from artcritic.errors import ContractError, DimensionError
from artcritic.tensor import Tensor, backward, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)


def test_matmul_hand_computed():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    # 1*5+2*7, 1*6+2*8 / 3*5+4*7, 3*6+4*8
    assert T.matmul(a, b).data.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_matmul_zero_annihilates():
    b = Tensor(np.random.default_rng(0).normal(size=(4, 2)))
    assert np.array_equal(T.matmul(Tensor(np.zeros((3, 4))), b).data, np.zeros((3, 2)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# ---------------------------------------------------------------- elementwise


def test_add_zero_is_identity():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 5)))
    assert np.array_equal(T.elementwise("add", x, Tensor(np.zeros((3, 5)))).data, x.data)


def test_sigmoid_zero_is_half():
    assert np.all(T.elementwise("sigmoid", Tensor(np.zeros(7))).data == 0.5)


def test_gelu_matches_closed_form():
    x = 1.0
    expected = 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))
    assert T.elementwise("gelu", Tensor([x])).data[0] == pytest.approx(expected, abs=1e-15)


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        T.elementwise("mul", Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_elementwise_scalar_operand():
    x = Tensor(np.arange(4.0))
    assert T.elementwise("mul", x, 2.0).data.tolist() == [0.0, 2.0, 4.0, 6.0]
    assert T.elementwise("scale", x, 0.5).data.tolist() == [0.0, 0.5, 1.0, 1.5]


def test_elementwise_unknown_kind():
    with pytest.raises(ContractError):
        T.elementwise("relu", Tensor(np.ones(2)))


# ---------------------------------------------------------------- layer norm


def _ln(x, eps=1e-5):
    d = x.shape[-1]
    return T.layer_norm(x, Tensor(np.ones(d)), Tensor(np.zeros(d)), eps)


def test_layer_norm_constant_row_is_zero():
    assert np.array_equal(_ln(Tensor(np.full((1, 6), 3.5))).data, np.zeros((1, 6)))


def test_layer_norm_already_normalised_row():
    out = _ln(Tensor([[1.0, -1.0]]), eps=1e-300).data
    assert out.tolist() == [[1.0, -1.0]]


def test_layer_norm_random_rows_standardised():
    x = Tensor(np.random.default_rng(2).normal(3.0, 5.0, size=(8, 32)))
    out = _ln(x, eps=1e-12).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-9
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-9


def test_layer_norm_empty_dimension():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_uniform_is_log_v():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((1, 10))), [3])
    assert loss.item() == pytest.approx(math.log(10), abs=1e-15)


def test_cross_entropy_confident_is_zero():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1000.0
    assert T.softmax_cross_entropy(Tensor(logits), [2]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_hand_evaluation():
    expected = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    loss = T.softmax_cross_entropy(Tensor([[1.0, 2.0, 3.0]]), [2])
    assert loss.item() == pytest.approx(expected, rel=1e-14)


def test_cross_entropy_ignores_positions():
    logits = Tensor(np.random.default_rng(3).normal(size=(4, 6)))
    full = T.softmax_cross_entropy(Tensor(logits.data[[1, 3]]), [2, 5]).item()
    masked = T.softmax_cross_entropy(logits, [-100, 2, -100, 5], ignore_index=-100).item()
    assert masked == pytest.approx(full, rel=1e-15)


def test_cross_entropy_all_ignored():
    with pytest.raises(ContractError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [-100, -100])


# ---------------------------------------------------------------- backward


def test_backward_sum_of_squares():
    x = leaf([1.5, -2.0, 0.25])
    backward(T.tsum(T.mul(x, x)))
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_matmul_against_finite_differences():
    rng = np.random.default_rng(4)
    W = Tensor(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(2, 4)))
    assert grad_check(lambda t: T.tsum(T.matmul(t, W)), x, 1e-5) < 1e-5
    assert grad_check(lambda t: T.tsum(T.matmul(x, t)), W, 1e-5) < 1e-5


def test_frozen_leaf_gets_no_gradient():
    frozen = Tensor([1.0, 2.0])
    x = leaf([3.0, 4.0])
    backward(T.tsum(T.mul(frozen, x)))
    assert frozen.grad is None
    assert x.grad.tolist() == [1.0, 2.0]


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        backward(T.mul(leaf([1.0, 2.0]), 2.0))


def test_shared_operand_gradients_sum():
    x = leaf([2.0])
    backward(T.tsum(T.add(T.mul(x, x), x)))
    assert x.grad.tolist() == [5.0]


def test_double_backward_accumulates_exactly_twice():
    rng = np.random.default_rng(5)
    x = leaf(rng.normal(size=(3, 4)))
    W = Tensor(rng.normal(size=(4, 2)))
    loss = T.tsum(T.gelu(T.matmul(x, W)))
    backward(loss)
    once = x.grad.copy()
    backward(loss)
    assert np.array_equal(x.grad, 2 * once)


# ---------------------------------------------------------------- grad_check


def test_grad_check_linear_is_exact():
    x = Tensor(np.random.default_rng(6).normal(size=5))
    assert grad_check(lambda t: T.tsum(t), x, 1e-5) < 1e-10


def test_grad_check_cubic_closed_form():
    x = leaf([1.0, 2.0])
    backward(T.tsum(T.power(x, 3)))
    assert x.grad.tolist() == [3.0, 12.0]
    assert grad_check(lambda t: T.tsum(T.power(t, 3)), Tensor([1.0, 2.0]), 1e-5) < 1e-6


def test_grad_check_rejects_vector_output():
    with pytest.raises(ContractError):
        grad_check(lambda t: T.scale(t, 2.0), Tensor([1.0, 2.0]), 1e-5)


RNG = np.random.default_rng(1234)
_A = RNG.normal(size=(3, 4))
_B = RNG.normal(size=(4, 5))
_G = RNG.normal(1.0, 0.3, size=4)
_BETA = RNG.normal(size=4)
_W = RNG.normal(size=(3, 4))
_E = RNG.normal(size=(2, 2, 4))
_L = RNG.normal(size=(5, 3))
_MASK = np.tril(np.ones((4, 4), dtype=bool))

PRIMITIVES = {
    "add": lambda t: T.tsum(T.mul(T.add(t, Tensor(_A)), Tensor(_W))),
    "sub": lambda t: T.tsum(T.mul(T.sub(Tensor(_A), t), Tensor(_W))),
    "mul": lambda t: T.tsum(T.mul(T.mul(t, Tensor(_A)), Tensor(_W))),
    "scale": lambda t: T.tsum(T.mul(T.scale(t, -1.7), Tensor(_W))),
    "matmul_left": lambda t: T.tsum(T.mul(T.matmul(t, Tensor(_B)), Tensor(np.full((3, 5), 1.3)))),
    "matmul_right": lambda t: T.tsum(T.matmul(Tensor(_L), t)),
    "gelu": lambda t: T.tsum(T.mul(T.gelu(t), Tensor(_W))),
    "sigmoid": lambda t: T.tsum(T.mul(T.sigmoid(t), Tensor(_W))),
    "tanh": lambda t: T.tsum(T.mul(T.tanh(t), Tensor(_W))),
    "exp": lambda t: T.tsum(T.mul(T.exp(t), Tensor(_W))),
    "abs": lambda t: T.tsum(T.mul(T.tabs(t), Tensor(_W))),
    "mean": lambda t: T.tsum(T.mul(T.mean(t, axis=0, keepdims=True), Tensor(_W[:1]))),
    "reshape_transpose": lambda t: T.tsum(T.mul(T.transpose(T.reshape(t, (4, 3))), Tensor(_W))),
    "concat": lambda t: T.tsum(T.mul(T.concat([t, Tensor(_A)], axis=0), Tensor(np.vstack([_W, _A])))),
    "softmax_masked": lambda t: T.tsum(T.mul(T.softmax(T.concat([t, Tensor(_A[:1])], 0),
                                                        mask=_MASK), Tensor(np.vstack([_W, _W[:1]])))),
    "layer_norm": lambda t: T.tsum(T.mul(T.layer_norm(t, Tensor(_G), Tensor(_BETA)), Tensor(_W))),
    "cross_entropy": lambda t: T.softmax_cross_entropy(t, [1, -100, 3]),
    "embedding": lambda t: T.tsum(T.mul(T.embedding(t, np.array([[0, 2], [2, 1]])), Tensor(_E))),
    "take_rows": lambda t: T.tsum(T.mul(T.take_rows(T.reshape(t, (3, 2, 2)), np.array([1, 0, 1])), Tensor(_W[:, :2]))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    x = Tensor(np.random.default_rng(99).normal(size=(3, 4)))
    assert grad_check(PRIMITIVES[name], x, 1e-5) < 1e-4


def test_layer_norm_affine_gradients():
    x = Tensor(np.random.default_rng(7).normal(size=(3, 4)))
    f_gamma = lambda g: T.tsum(T.mul(T.layer_norm(x, g, Tensor(_BETA)), Tensor(_W)))
    f_beta = lambda b: T.tsum(T.mul(T.layer_norm(x, Tensor(_G), b), Tensor(_W)))
    assert grad_check(f_gamma, Tensor(_G), 1e-5) < 1e-4
    assert grad_check(f_beta, Tensor(_BETA), 1e-5) < 1e-4


def test_batched_matmul_gradients():
    rng = np.random.default_rng(8)
    b = Tensor(rng.normal(size=(2, 3, 4, 5)))
    a0 = Tensor(rng.normal(size=(2, 3, 6, 4)))
    assert grad_check(lambda t: T.tsum(T.matmul(t, b)), a0, 1e-5) < 1e-4
    assert grad_check(lambda t: T.tsum(T.matmul(a0, t)), b, 1e-5) < 1e-4
    shared = Tensor(rng.normal(size=(4, 5)))
    assert grad_check(lambda t: T.tsum(T.gelu(T.matmul(a0, t))), shared, 1e-5) < 1e-4


# ---------------------------------------------------------------- properties


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 7), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-1e3, 1e3)))
def test_forward_outputs_finite(x):
    t = Tensor(x)
    g = Tensor(np.ones(6))
    z = Tensor(np.zeros(6))
    outs = [T.gelu(t), T.sigmoid(t), T.tanh(t), T.softmax(t), T.layer_norm(t, g, z),
            T.softmax_cross_entropy(t, [0, 3, 5])]
    assert all(np.isfinite(o.data).all() for o in outs)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50)))
def test_backward_gradients_finite(x):
    t = Tensor(x, requires_grad=True)
    loss = T.softmax_cross_entropy(T.layer_norm(T.gelu(t), Tensor(np.ones(5)), Tensor(np.zeros(5))), [1, 4])
    backward(loss)
    assert np.isfinite(t.grad).all()
