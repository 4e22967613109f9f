import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mqforecast.tensor import (Tensor, concat, dilated_conv1d, no_grad,
                               quantile_loss, tensor)

from conftest import numerical_grad, rel_err


def check_grad(build, arrays, tol=1e-6):
    """build() -> scalar Tensor; compare .backward() grads to central FD."""
    out = build()
    out.backward()
    for t in arrays:
        fd = numerical_grad(lambda: build().data, t.data)
        assert rel_err(t.grad, fd) < tol, (t.grad, fd)
        t.zero_grad()


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# -- arithmetic ----------------------------------------------------------


def test_add_mul_broadcast_grads(rng):
    a = leaf(rng, 3, 1, 4)
    b = leaf(rng, 5, 1)
    check_grad(lambda: ((a + b) * (a * 2.0 - 1.0)).sum(), [a, b])


def test_div_pow_grads(rng):
    a = leaf(rng, 4, 3)
    b = Tensor(rng.uniform(0.5, 2.0, (3,)), requires_grad=True)
    check_grad(lambda: ((a / b) ** 3).sum(), [a, b])


def test_matmul_matches_numpy(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 6))
    assert np.allclose((Tensor(a) @ Tensor(b)).data, a @ b)


def test_matmul_grad_2d(rng):
    a, b = leaf(rng, 4, 5), leaf(rng, 5, 3)
    check_grad(lambda: (a @ b).sum(), [a, b])


def test_matmul_grad_batched(rng):
    a, b = leaf(rng, 2, 3, 4, 5), leaf(rng, 3, 5, 6)
    check_grad(lambda: ((a @ b) ** 2).sum(), [a, b])


def test_matmul_grad_1d(rng):
    a, b = leaf(rng, 5), leaf(rng, 5)
    check_grad(lambda: (a @ b) * 1.0, [a, b])
    m = leaf(rng, 5, 3)
    check_grad(lambda: (a @ m).sum(), [a, m])


def test_unary_grads(rng):
    x = Tensor(rng.uniform(0.5, 2.0, (4, 3)), requires_grad=True)
    check_grad(lambda: (x.exp() + x.log() + x.sqrt()).sum(), [x])
    y = leaf(rng, 6)
    check_grad(lambda: (y.abs() * y.relu()).sum(), [y], tol=1e-5)


def test_relu_subgradient_zero_at_zero():
    x = Tensor(np.array([0.0, -1.0, 2.0]), requires_grad=True)
    x.relu().sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sum_mean_axes(rng):
    x = leaf(rng, 2, 3, 4)
    check_grad(lambda: (x.sum(axis=1) ** 2).sum(), [x])
    check_grad(lambda: (x.mean(axis=(0, 2), keepdims=True) ** 2).sum(), [x])


# -- softmax -------------------------------------------------------------


def test_softmax_closed_form():
    s = Tensor(np.array([0.0, np.log(2.0), np.log(3.0)])).softmax()
    assert np.allclose(s.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(3, 5))
    a = Tensor(x).softmax(axis=-1).data
    b = Tensor(x + 100.0).softmax(axis=-1).data
    assert np.allclose(a, b, atol=1e-12)


def test_softmax_grad(rng):
    x = leaf(rng, 2, 4)
    w = Tensor(rng.normal(size=(2, 4)))
    check_grad(lambda: (x.softmax(axis=-1) * w).sum(), [x])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    s = Tensor(np.array(vals)).softmax().data
    assert abs(s.sum() - 1.0) < 1e-12
    assert np.all(s >= 0)


# -- shape ops -----------------------------------------------------------


def test_shape_op_grads(rng):
    x = leaf(rng, 2, 3, 4)
    check_grad(lambda: (x.reshape(6, 4) ** 2).sum(), [x])
    check_grad(lambda: (x.swapaxes(0, 2) * 3.0).sum(), [x])
    check_grad(lambda: (x.expand_dims(1) ** 3).sum(), [x])
    check_grad(lambda: (x[:, 1:, ::2] ** 2).sum(), [x])
    check_grad(lambda: (x.pad_axis(1, 2, 1) ** 2).sum(), [x])


def test_concat_grad(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
    check_grad(lambda: (concat([a, b], axis=1) ** 2).sum(), [a, b])


def test_gather_time(rng):
    x = leaf(rng, 2, 6, 3)
    idx = np.array([[0, 2], [1, 5], [3, 3]])
    out = x.gather_time(idx)
    assert out.shape == (2, 3, 2, 3)
    assert np.array_equal(out.data[1, 2, 0], x.data[1, 3])
    check_grad(lambda: (x.gather_time(idx) ** 2).sum(), [x])


def test_scatter_take_pairs_roundtrip(rng):
    x = leaf(rng, 2, 3, 2, 4)
    rows = np.array([[0, 1], [1, 2], [2, 3]])
    cols = np.array([[0, 1], [0, 1], [0, 1]])
    scattered = x.scatter_pairs(rows, cols, 4)
    back = scattered.take_pairs(rows, cols)
    assert np.array_equal(back.data, x.data)
    check_grad(lambda: (x.scatter_pairs(rows, cols, 4) ** 2).sum(), [x])
    y = leaf(rng, 2, 4, 2, 4)
    check_grad(lambda: (y.take_pairs(rows, cols) ** 2).sum(), [y])


# -- dropout, no_grad, errors --------------------------------------------


def test_dropout_inverted_scaling(rng):
    x = Tensor(np.ones((200, 200)))
    out = x.dropout(0.3, np.random.default_rng(1))
    kept = out.data[out.data > 0]
    assert np.allclose(kept, 1.0 / 0.7)
    assert abs(out.data.mean() - 1.0) < 0.02


def test_dropout_grad_matches_mask(rng):
    x = leaf(rng, 50)
    out = x.dropout(0.5, np.random.default_rng(2))
    mask = (out.data != 0).astype(float)
    out.sum().backward()
    assert np.allclose(x.grad, mask * 2.0)


def test_no_grad_blocks_graph(rng):
    x = leaf(rng, 3)
    with no_grad():
        y = (x * 2.0).sum()
    assert y._parents == ()


def test_nonfinite_raises():
    with pytest.raises(FloatingPointError):
        Tensor(np.array([0.0])).log()


# -- dilated convolution -------------------------------------------------


def test_causal_conv_hand_case():
    # identity tap on the current step plus a tap 2 steps back
    x = Tensor(np.array([1.0, 0.0, 0.0, 0.0, 1.0])[None, :, None])
    kernel = Tensor(np.array([[[1.0]], [[1.0]]]))  # w=2: taps at lags d, 0
    out = dilated_conv1d(x, kernel, dilation=2, mode="causal")
    assert np.allclose(out.data[0, :, 0], [1.0, 0.0, 1.0, 0.0, 1.0])


def test_causal_conv_receptive_field(rng):
    x = np.zeros((1, 10, 1))
    kernel = Tensor(np.ones((2, 1, 1)))
    base = dilated_conv1d(Tensor(x), kernel, 4, mode="causal").data.copy()
    x2 = x.copy()
    x2[0, 0, 0] = 1.0  # lag 4 from t=4: inside; lag >4: outside
    out = dilated_conv1d(Tensor(x2), kernel, 4, mode="causal").data
    changed = np.nonzero((out != base).any(axis=2))[1]
    assert set(changed) == {0, 4}


def test_bidirectional_conv_centered():
    x = Tensor(np.eye(1, 7, 3)[..., None] * 1.0)  # impulse at t=3
    kernel = Tensor(np.array([[[1.0]], [[2.0]], [[4.0]]]))
    out = dilated_conv1d(x, kernel, dilation=2, mode="bidirectional")
    assert np.allclose(out.data[0, :, 0], [0, 4, 0, 2, 0, 1, 0])


def test_bidirectional_even_width_rejected():
    with pytest.raises(ValueError):
        dilated_conv1d(Tensor(np.zeros((1, 4, 1))),
                       Tensor(np.zeros((2, 1, 1))), 1, mode="bidirectional")


def test_conv_grads(rng):
    x = leaf(rng, 2, 8, 3)
    k = leaf(rng, 3, 3, 2)
    check_grad(lambda: (dilated_conv1d(x, k, 2, "causal") ** 2).sum(), [x, k])
    check_grad(
        lambda: (dilated_conv1d(x, k, 2, "bidirectional") ** 2).sum(), [x, k])


# -- quantile loss -------------------------------------------------------


def test_quantile_loss_closed_form():
    y = Tensor(np.array([1.0, 1.0, 1.0]))
    y_hat = Tensor(np.array([0.0, 1.0, 3.0]))
    out = quantile_loss(y, y_hat, 0.9)
    assert np.allclose(out.data, [0.9, 0.0, 0.2], atol=1e-15)


def test_quantile_loss_grad(rng):
    y = Tensor(rng.normal(size=6))
    y_hat = leaf(rng, 6)
    check_grad(lambda: quantile_loss(y, y_hat, 0.7).sum(), [y_hat])


def test_quantile_loss_tie_subgradient():
    y = Tensor(np.array([2.0]))
    y_hat = Tensor(np.array([2.0]), requires_grad=True)
    quantile_loss(y, y_hat, 0.5).sum().backward()
    assert y_hat.grad[0] == 0.0


def test_quantile_loss_bad_level():
    with pytest.raises(ValueError):
        quantile_loss(tensor([1.0]), tensor([1.0]), 1.5)


# -- end-to-end MLP ------------------------------------------------------


def test_mlp_backward_matches_fd(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    w1, b1 = leaf(rng, 3, 8), leaf(rng, 8)
    w2, b2 = leaf(rng, 8, 2), leaf(rng, 2)
    y = Tensor(rng.normal(size=(4, 2)))

    def loss():
        hdn = (x @ w1 + b1).relu()
        return (((hdn @ w2 + b2) - y) ** 2).mean()

    check_grad(loss, [w1, b1, w2, b2], tol=1e-5)
