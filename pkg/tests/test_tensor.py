"""Autodiff engine: finite-difference gradient checks and frozen values."""

import math

import numpy as np
import pytest

from conftest import numeric_grad
from panelgen.tensor import (GraphError, ShapeError, Tensor, concat, embedding,
                             gelu, grad_enabled, layer_norm, matmul, no_grad,
                             reshape, softmax, tmean, transpose, tsum)


def _leaves(shapes, seed=0, positive=()):
    rng = np.random.default_rng(seed)
    out = []
    for i, s in enumerate(shapes):
        x = rng.standard_normal(s)
        if i in positive:
            x = np.abs(x) + 0.5
        out.append(Tensor(x, requires_grad=True))
    return out


def _grad_check(op, shapes, positive=(), seed=0, tol=1e-6):
    """Backward pass vs central differences, using a fixed random cotangent."""
    leaves = _leaves(shapes, seed=seed, positive=positive)
    probe_rng = np.random.default_rng(seed + 1)
    probe = {}

    def make_loss():
        out = op(*leaves)
        if "w" not in probe:
            probe["w"] = probe_rng.standard_normal(out.data.shape)
        return tsum(out * Tensor(probe["w"]))

    loss = make_loss()
    loss.backward()
    for leaf in leaves:
        assert leaf.grad is not None, "leaf got no gradient"
        num = numeric_grad(lambda: make_loss().item(), leaf.data)
        np.testing.assert_allclose(leaf.grad, num, rtol=tol, atol=tol)


# -- elementwise and structural ops -------------------------------------------

def test_add_broadcast_grad():
    _grad_check(lambda a, b: a + b, [(3, 1), (1, 4)])


def test_sub_broadcast_grad():
    _grad_check(lambda a, b: a - b, [(2, 3), (3,)])


def test_neg_grad():
    _grad_check(lambda a: -a, [(2, 5)])


def test_mul_broadcast_grad():
    _grad_check(lambda a, b: a * b, [(2, 3, 1), (3, 4)])


def test_div_grad():
    _grad_check(lambda a, b: a / b, [(3, 4), (3, 4)], positive=(1,))


def test_scalar_operand_grad():
    _grad_check(lambda a: 2.0 * a + 1.0 - a / 4.0, [(2, 3)])


@pytest.mark.parametrize("p", [3.0, 2.0, 0.5, -1.5])
def test_power_grad(p):
    _grad_check(lambda a: a ** p, [(2, 4)], positive=(0,))


def test_reshape_grad():
    _grad_check(lambda a: reshape(a, (6, 4)), [(2, 3, 4)])


def test_transpose_grad():
    _grad_check(lambda a: transpose(a, (2, 0, 1)), [(2, 3, 4)])


def test_getitem_grad():
    _grad_check(lambda a: a[1:, ::2], [(4, 6)])


def test_concat_grad():
    _grad_check(lambda a, b, c: concat([a, b, c], axis=1),
                [(2, 1, 3), (2, 2, 3), (2, 4, 3)])


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False),
                                           ((0, 2), False), (1, True)])
def test_tsum_grad(axis, keepdims):
    _grad_check(lambda a: tsum(a, axis=axis, keepdims=keepdims), [(2, 3, 4)])


@pytest.mark.parametrize("axis,keepdims", [(None, False), (2, False), ((0, 1), True)])
def test_tmean_grad(axis, keepdims):
    _grad_check(lambda a: tmean(a, axis=axis, keepdims=keepdims), [(2, 3, 4)])


def test_matmul_2d_grad():
    _grad_check(matmul, [(3, 4), (4, 5)])


def test_matmul_batched_grad():
    _grad_check(matmul, [(2, 3, 4), (2, 4, 5)])


def test_matmul_nd_by_2d_grad():
    _grad_check(matmul, [(2, 3, 4), (4, 5)])


def test_matmul_4d_batched_grad():
    _grad_check(matmul, [(2, 2, 3, 4), (2, 2, 4, 3)])


@pytest.mark.parametrize("axis", [-1, 1])
def test_softmax_grad(axis):
    _grad_check(lambda a: softmax(a, axis=axis), [(2, 3, 4)])


def test_softmax_masked_grad():
    mask = np.zeros((2, 3, 4))
    mask[..., -1] = -1e9
    _grad_check(lambda a: softmax(a, axis=-1, additive_mask=mask), [(2, 3, 4)])


def test_layer_norm_grad():
    _grad_check(lambda x, g, b: layer_norm(x, g, b), [(2, 3, 5), (5,), (5,)],
                tol=5e-6)


def test_gelu_grad():
    _grad_check(gelu, [(3, 7)])


def test_embedding_grad():
    ids = np.array([[0, 2, 2], [5, 1, 0]], dtype=np.int64)
    _grad_check(lambda t: embedding(t, ids), [(7, 4)])


# -- frozen values -------------------------------------------------------------

def test_softmax_frozen_quarters():
    out = softmax(Tensor(np.array([0.0, math.log(3.0)])))
    np.testing.assert_allclose(out.data, [0.25, 0.75], rtol=1e-12)


def test_softmax_mask_gives_exact_zero():
    mask = np.array([0.0, -1e9])
    out = softmax(Tensor(np.zeros(2)), additive_mask=mask)
    assert out.data[1] == 0.0
    assert out.data[0] == 1.0


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(3).standard_normal((4, 9)) * 30)
    np.testing.assert_allclose(softmax(x).data.sum(axis=-1), np.ones(4), rtol=1e-12)


def test_softmax_mask_keeps_dtype():
    x = Tensor(np.zeros((2, 3), dtype=np.float32))
    out = softmax(x, additive_mask=np.zeros((2, 3), dtype=np.float64))
    assert out.data.dtype == np.float32


def test_layer_norm_constant_row_is_bias():
    x = Tensor(np.full((2, 4), 3.7))
    gain = Tensor(np.full(4, 2.0))
    bias = Tensor(np.arange(4.0))
    out = layer_norm(x, gain, bias)
    np.testing.assert_allclose(out.data, np.broadcast_to(bias.data, (2, 4)),
                               atol=1e-12)


def test_layer_norm_frozen_two_point():
    out = layer_norm(Tensor(np.array([[-1.0, 1.0]])), None, None)
    want = np.array([[-1.0, 1.0]]) / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out.data, want, rtol=1e-12)


def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((4, 4))
    out = matmul(Tensor(a), Tensor(np.eye(4)))
    np.testing.assert_array_equal(out.data, a @ np.eye(4))


def test_sum_backward_is_ones():
    x = Tensor(np.random.default_rng(1).standard_normal((3, 4)), requires_grad=True)
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_sum_of_square_backward_is_2x():
    x = Tensor(np.random.default_rng(2).standard_normal((3, 4)), requires_grad=True)
    tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, 2.0 * x.data)


def test_gelu_matches_tanh_approximation():
    c, a = 0.7978845608028654, 0.044715
    x = np.linspace(-4, 4, 33)
    want = 0.5 * x * (1.0 + np.tanh(c * (x + a * x ** 3)))
    np.testing.assert_allclose(gelu(Tensor(x)).data, want, rtol=1e-12)
    assert gelu(Tensor(np.zeros(1))).data[0] == 0.0


def test_embedding_duplicate_ids_accumulate():
    table = Tensor(np.random.default_rng(4).standard_normal((5, 3)),
                   requires_grad=True)
    ids = np.array([1, 1, 1], dtype=np.int64)
    tsum(embedding(table, ids)).backward()
    np.testing.assert_array_equal(table.grad[1], np.full(3, 3.0))
    np.testing.assert_array_equal(table.grad[0], np.zeros(3))


# -- graph mechanics -----------------------------------------------------------

def test_reused_node_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    tsum(x + x).backward()
    np.testing.assert_array_equal(x.grad, np.full(2, 2.0))


def test_diamond_graph_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    tsum(y + x).backward()
    np.testing.assert_allclose(x.grad, [7.0], rtol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        (x + 1.0).backward()


def test_no_grad_severs_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        assert not grad_enabled()
        y = x * 2.0
    assert grad_enabled()
    assert not y.requires_grad
    assert y._parents == ()


def test_detach_blocks_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    tsum(x.detach() * 5.0 + x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_non_grad_leaf_gets_no_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    c = Tensor(np.full(2, 3.0))
    tsum(x * c).backward()
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, c.data)


def test_python_scalar_keeps_float32():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 2.5).data.dtype == np.float32
    assert (x + 1).data.dtype == np.float32
    assert (x ** 2.0).data.dtype == np.float32


def test_shape_mismatch_raises():
    with pytest.raises((ShapeError, ValueError)):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_int_input_coerces_to_float32():
    t = Tensor(np.zeros(3, dtype=np.int64))
    assert t.data.dtype == np.float32


def test_mixed_tensor_dtypes_rejected():
    with pytest.raises(TypeError):
        Tensor(np.zeros(2, dtype=np.float32)) + Tensor(np.zeros(2, dtype=np.float64))
