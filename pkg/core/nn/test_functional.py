import math

import numpy as np
import pytest

from core.errors import NonFiniteError, ShapeMismatchError
from core.nn import functional as F
from core.nn.gradcheck import max_gradient_error
from core.nn.layers import Linear, MultiHeadSelfAttention
from core.nn.optim import adam_step, step_lr
from core.nn.tensor import Param, Tensor, precision

# (dtype, finite-difference step, tolerance)
MODES = [(np.float32, 1e-3, 1e-3), (np.float64, 1e-6, 1e-6)]


def _leaf(rng, *shape, away_from_zero=False):
    values = rng.normal(size=shape)
    if away_from_zero:
        values = np.sign(values) * (np.abs(values) + 0.05)
    return Tensor(values, requires_grad=True)


def _weighted(out: Tensor, seed=99) -> Tensor:
    """Random linear functional so every output entry contributes to the scalar."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return (out * r).sum()


@pytest.mark.parametrize("dtype,h,tol", MODES)
@pytest.mark.parametrize("shape,kernel,stride,padding", [
    ((1, 5, 5, 2), 3, 1, 1),
    ((2, 6, 7, 3), 3, 2, 1),
    ((1, 8, 8, 2), 4, 4, 0),
    ((1, 4, 4, 3), 1, 1, 0),
    ((1, 7, 5, 1), 2, 1, 0),
])
def test_conv2d_gradients(dtype, h, tol, shape, kernel, stride, padding):
    rng = np.random.default_rng(1)
    with precision(dtype):
        x = _leaf(rng, *shape)
        w = _leaf(rng, kernel, kernel, shape[3], 4)
        b = _leaf(rng, 4)
        err = max_gradient_error(lambda: _weighted(F.conv2d(x, w, b, stride, padding)), [x, w, b], h)
    assert err < tol


@pytest.mark.parametrize("dtype,h,tol", MODES)
@pytest.mark.parametrize("shape,kernel,stride,padding", [
    ((1, 3, 3, 2), 2, 2, 0),
    ((2, 4, 3, 3), 3, 2, 1),
    ((1, 2, 2, 4), 4, 2, 1),
])
def test_conv_transpose2d_gradients(dtype, h, tol, shape, kernel, stride, padding):
    rng = np.random.default_rng(2)
    with precision(dtype):
        x = _leaf(rng, *shape)
        w = _leaf(rng, kernel, kernel, shape[3], 3)
        b = _leaf(rng, 3)
        err = max_gradient_error(lambda: _weighted(F.conv_transpose2d(x, w, b, stride, padding)), [x, w, b], h)
    assert err < tol


@pytest.mark.parametrize("dtype,h,tol", MODES)
@pytest.mark.parametrize("shape,out_hw", [((1, 4, 4, 2), (7, 9)), ((2, 6, 5, 3), (3, 2)), ((1, 1, 3, 1), (4, 4))])
def test_bilinear_resize_gradients(dtype, h, tol, shape, out_hw):
    rng = np.random.default_rng(3)
    with precision(dtype):
        x = _leaf(rng, *shape)
        err = max_gradient_error(lambda: _weighted(F.bilinear_resize(x, *out_hw)), [x], h)
    assert err < tol


@pytest.mark.parametrize("dtype,h,tol", MODES)
def test_bilinear_sample_gradients(dtype, h, tol):
    rng = np.random.default_rng(4)
    with precision(dtype):
        x = _leaf(rng, 6, 5, 3)
        pts = rng.uniform(0, 4, size=(7, 2))
        err = max_gradient_error(lambda: _weighted(F.bilinear_sample(x, pts)), [x], h)
    assert err < tol


@pytest.mark.parametrize("dtype,h,tol", MODES)
@pytest.mark.parametrize("op", [F.relu, F.leaky_relu, F.sigmoid, F.exp])
def test_activation_gradients(dtype, h, tol, op):
    rng = np.random.default_rng(5)
    with precision(dtype):
        x = _leaf(rng, 4, 6, away_from_zero=True)
        err = max_gradient_error(lambda: _weighted(op(x)), [x], h)
    assert err < tol


@pytest.mark.parametrize("dtype,h,tol", MODES)
def test_softmax_with_mask_gradients(dtype, h, tol):
    rng = np.random.default_rng(6)
    mask = rng.random((5, 5)) < 0.4
    np.fill_diagonal(mask, False)
    with precision(dtype):
        x = _leaf(rng, 5, 5)
        err = max_gradient_error(lambda: _weighted(F.softmax(x, axis=-1, mask=mask)), [x], h)
    assert err < tol


@pytest.mark.parametrize("dtype,h,tol", MODES)
def test_bce_gradients(dtype, h, tol):
    rng = np.random.default_rng(7)
    target = rng.random((4, 5))
    with precision(dtype):
        z = _leaf(rng, 4, 5)
        err = max_gradient_error(lambda: F.bce_loss(F.sigmoid(z), target), [z], h)
    assert err < tol


@pytest.mark.parametrize("dtype,h,tol", MODES)
def test_mhsa_gradients(dtype, h, tol):
    rng = np.random.default_rng(8)
    with precision(dtype):
        attn = MultiHeadSelfAttention("attn", 8, 2, seed=3)
        x = _leaf(rng, 5, 8)
        mask = np.zeros((5, 5))
        mask[0, 3] = mask[3, 0] = 1
        leaves = [x, attn.query.weight.tensor, attn.value.bias.tensor]
        err = max_gradient_error(lambda: _weighted(attn(x, mask=mask)), leaves, h)
    assert err < tol


@pytest.mark.parametrize("dtype,h,tol", MODES)
def test_sparse_mhsa_gradients(dtype, h, tol):
    rng = np.random.default_rng(9)
    rows = np.array([0, 0, 1, 1, 2, 3, 3, 3])
    cols = np.array([0, 2, 1, 3, 2, 0, 1, 3])
    with precision(dtype):
        attn = MultiHeadSelfAttention("attn", 8, 2, seed=4)
        x = _leaf(rng, 4, 8)
        err = max_gradient_error(lambda: _weighted(attn.sparse(x, rows, cols)), [x, attn.key.weight.tensor], h)
    assert err < tol


@pytest.mark.parametrize("dtype,h,tol", MODES)
def test_structural_op_gradients(dtype, h, tol):
    rng = np.random.default_rng(10)
    with precision(dtype):
        a = _leaf(rng, 3, 4)
        b = _leaf(rng, 3, 2)
        idx = np.array([2, 0, 2, 1])

        def fn():
            joined = F.concat([a, b], axis=1)
            gathered = F.take(joined, idx)
            return _weighted((gathered @ joined.T).reshape(4, 3, 1).transpose(2, 0, 1).mean(axis=1))
        err = max_gradient_error(fn, [a, b], h)
    assert err < tol


def test_conv_identity_and_hand_sum():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 4, 3)))
    eye = Tensor(np.eye(3).reshape(1, 1, 3, 3))
    np.testing.assert_array_equal(F.conv2d(x, eye).data, x.data)

    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    ones = Tensor(np.ones((2, 2, 1, 1)))
    assert F.conv2d(x, ones).data.item() == 10.0


def test_conv_shape_mismatch_names_dimensions():
    x = Tensor(np.zeros((1, 4, 4, 3)))
    w = Tensor(np.zeros((3, 3, 2, 5)))
    with pytest.raises(ShapeMismatchError, match="3 channels but kernel expects 2"):
        F.conv2d(x, w)


def test_conv_transpose_is_adjoint():
    rng = np.random.default_rng(11)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(1, 9, 9, 2)))
        w = Tensor(rng.normal(size=(3, 3, 2, 4)))
        y = Tensor(rng.normal(size=(1, 5, 5, 4)))
        lhs = float((F.conv2d(x, w, stride=2, padding=1).data * y.data).sum())
        wt = Tensor(w.data.transpose(0, 1, 3, 2))
        rhs = float((x.data * F.conv_transpose2d(y, wt, stride=2, padding=1).data).sum())
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_bilinear_conventions():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 5, 6, 2)))
    np.testing.assert_allclose(F.bilinear_resize(x, 5, 6).data, x.data, atol=1e-6)
    grid = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1))
    assert F.bilinear_sample(grid, [(0.5, 0.5)]).data.item() == pytest.approx(1.5)
    assert F.bilinear_sample(grid, [(1.0, 0.0)]).data.item() == 1.0
    # corners map onto corners
    up = F.bilinear_resize(grid.reshape(1, 2, 2, 1), 3, 3).data[0, :, :, 0]
    assert up[0, 0] == 0.0 and up[2, 2] == 3.0 and up[1, 1] == pytest.approx(1.5)


def test_activation_values():
    assert F.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert F.leaky_relu(Tensor([-1.0])).data[0] == pytest.approx(-0.01)
    assert F.relu(Tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]
    big = F.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(big))


def test_bce_values():
    assert F.bce_loss(Tensor([0.5]), [0.5]).item() == pytest.approx(math.log(2), rel=1e-6)
    assert F.bce_loss(Tensor([1.0]), [1.0]).item() <= 1e-6
    total = F.bce_loss(Tensor([0.5] * 4), [1, 1, 0, 0], denominator=3)
    assert total.item() == pytest.approx(4 * math.log(2) / 3, rel=1e-6)


def test_mhsa_single_token_and_identity_mask():
    with precision(np.float64):
        attn = MultiHeadSelfAttention("attn", 8, 4, seed=0)
        x = Tensor(np.random.default_rng(1).normal(size=(1, 8)))
        np.testing.assert_allclose(attn(x).data, attn.out(attn.value(x)).data, atol=1e-12)

        x = Tensor(np.random.default_rng(2).normal(size=(4, 8)))
        mask = 1 - np.eye(4)
        out, weights = attn(x, mask=mask, return_weights=True)
        np.testing.assert_allclose(weights.data, np.broadcast_to(np.eye(4), (4, 4, 4)), atol=1e-12)
        np.testing.assert_allclose(out.data, attn.out(attn.value(x)).data, atol=1e-12)


def test_mhsa_rows_are_convex_combinations():
    with precision(np.float64):
        attn = MultiHeadSelfAttention("attn", 4, 1, seed=0)
        for layer in (attn.value, attn.out):
            layer.weight.tensor.data = np.eye(4)
            layer.bias.tensor.data = np.zeros(4)
        x = Tensor(np.random.default_rng(3).normal(size=(6, 4)))
        out, weights = attn(x, return_weights=True)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out.data, weights.data[0] @ x.data, atol=1e-12)
    assert np.all(out.data <= x.data.max(axis=0) + 1e-12)
    assert np.all(out.data >= x.data.min(axis=0) - 1e-12)


def test_fully_masked_row_rejected():
    attn = MultiHeadSelfAttention("attn", 4, 2)
    with pytest.raises(ValueError):
        attn(Tensor(np.zeros((2, 4))), mask=np.ones((2, 2)))


def test_sparse_attention_matches_dense():
    rng = np.random.default_rng(12)
    with precision(np.float64):
        attn = MultiHeadSelfAttention("attn", 8, 2, seed=5)
        x = Tensor(rng.normal(size=(7, 8)))
        allowed = rng.random((7, 7)) < 0.5
        allowed = allowed | allowed.T | np.eye(7, dtype=bool)
        rows, cols = np.nonzero(allowed)
        dense = attn(x, mask=~allowed)
        sparse = attn.sparse(x, rows, cols)
    np.testing.assert_allclose(sparse.data, dense.data, atol=1e-10)


def test_adam_behaviour():
    p = Param("w", np.array([1.0, -2.0, 3.0]))
    p.tensor.grad = np.zeros(3, dtype=p.data.dtype)
    adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, np.array([1.0, -2.0, 3.0], dtype=p.data.dtype))

    q = Param("q", np.zeros(3))
    q.tensor.grad = np.array([0.3, -5.0, 1e-3], dtype=q.data.dtype)
    adam_step([q], lr=0.01)
    np.testing.assert_allclose(q.data, [-0.01, 0.01, -0.01], rtol=1e-3)

    with precision(np.float64):
        x = Param("x", np.array([1.0]))
    for _ in range(200):
        x.tensor.grad = 2 * x.data
        adam_step([x], lr=0.05)
    assert abs(x.data[0]) < 0.1


def test_adam_rejects_non_finite_gradient():
    p = Param("encoder.stem.weight", np.ones(2))
    p.tensor.grad = np.array([np.nan, 1.0], dtype=p.data.dtype)
    with pytest.raises(NonFiniteError, match="encoder.stem.weight"):
        adam_step([p], lr=0.1)


def test_step_schedule():
    assert step_lr(1e-3, 0) == 1e-3
    assert step_lr(1e-3, 9) == 1e-3
    assert step_lr(1e-3, 10) == pytest.approx(1e-4)
    assert step_lr(1e-3, 25) == pytest.approx(1e-5)
    assert step_lr(1e-3, 30) == pytest.approx(1e-6)


def test_linear_end_to_end_gradient():
    rng = np.random.default_rng(13)
    with precision(np.float64):
        layer = Linear("fc", 5, 3, seed=1)
        x = _leaf(rng, 4, 5)
        err = max_gradient_error(lambda: _weighted(F.relu(layer(x))), [x, layer.weight.tensor, layer.bias.tensor], 1e-6)
    assert err < 1e-6
