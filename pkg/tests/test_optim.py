"""AdamW closed forms, NaN detection, clipping, and state round trips."""

import numpy as np
import pytest

from panelgen.optim import AdamW, OptimizerError, clip_grad_norm
from panelgen.tensor import Tensor


def _param(value, shape=(1,)):
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)


def test_first_step_closed_form():
    # w=1, g=1, lr=0.1: bias corrections cancel, update = lr * 1/(1+eps).
    p = _param(1.0)
    opt = AdamW({"w": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.ones_like(p.data)
    opt.step()
    assert abs(p.data[0] - 0.9) <= 1e-8


def test_weight_decay_only_is_exact():
    # Zero gradient: adaptive update is exactly 0, decay is w *= (1 - lr*wd).
    p = _param(1.0)
    opt = AdamW({"w": p}, lr=0.1, weight_decay=0.1)
    p.grad = np.zeros_like(p.data)
    opt.step()
    assert p.data[0] == 0.99


def test_decay_is_decoupled_from_moments():
    # Weight decay must not enter m/v; moments see only the raw gradient.
    p = _param(1.0)
    opt = AdamW({"w": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.full_like(p.data, 2.0)
    opt.step()
    np.testing.assert_allclose(opt.m["w"], [0.2], rtol=1e-15)
    np.testing.assert_allclose(opt.v["w"], [0.004], rtol=1e-15)


def test_nan_gradient_raises_with_name():
    p = _param(1.0)
    opt = AdamW({"blocks.0.attn.wq": p}, lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(OptimizerError) as err:
        opt.step()
    assert "blocks.0.attn.wq" in str(err.value)
    assert "NaN" in str(err.value)


def test_missing_gradient_leaves_param_untouched():
    p = _param(3.0)
    before = p.data.copy()
    opt = AdamW({"w": p}, lr=0.1, weight_decay=0.0)
    p.grad = None
    opt.step()
    np.testing.assert_array_equal(p.data, before)
    assert opt.step_count == 1


def test_zero_grad_clears_all():
    a, b = _param(1.0), _param(2.0)
    a.grad = np.ones(1)
    b.grad = np.ones(1)
    AdamW({"a": a, "b": b}).zero_grad()
    assert a.grad is None and b.grad is None


def test_clip_grad_norm_three_four_five():
    a, b = _param(0.0), _param(0.0)
    a.grad = np.array([3.0])
    b.grad = np.array([4.0])
    norm = clip_grad_norm({"a": a, "b": b}, max_norm=1.0)
    assert norm == 5.0
    joint = np.sqrt(a.grad[0] ** 2 + b.grad[0] ** 2)
    np.testing.assert_allclose(joint, 1.0, rtol=1e-12)
    np.testing.assert_allclose(a.grad, [0.6], rtol=1e-12)


def test_clip_under_threshold_is_identity():
    a = _param(0.0)
    a.grad = np.array([0.25])
    before = a.grad.copy()
    norm = clip_grad_norm({"a": a}, max_norm=1.0)
    assert norm == 0.25
    np.testing.assert_array_equal(a.grad, before)


def test_state_round_trip_resumes_bit_exact():
    rng = np.random.default_rng(7)

    def fresh():
        return {"a": Tensor(np.linspace(-1, 1, 6).reshape(2, 3), requires_grad=True),
                "b": Tensor(np.full(4, 0.5), requires_grad=True)}

    def grads_at(step):
        g = np.random.default_rng(100 + step)
        return {"a": g.standard_normal((2, 3)), "b": g.standard_normal(4)}

    # Uninterrupted run of 5 steps.
    p1 = fresh()
    o1 = AdamW(p1, lr=0.05, weight_decay=0.01)
    for s in range(5):
        for k, g in grads_at(s).items():
            p1[k].grad = g
        o1.step()

    # Run 3 steps, snapshot, restore into a fresh optimizer, run 2 more.
    p2 = fresh()
    o2 = AdamW(p2, lr=0.05, weight_decay=0.01)
    for s in range(3):
        for k, g in grads_at(s).items():
            p2[k].grad = g
        o2.step()
    state = {k: v.copy() for k, v in o2.state_arrays().items()}
    p3 = {k: Tensor(p2[k].data.copy(), requires_grad=True) for k in p2}
    o3 = AdamW(p3, lr=0.05, weight_decay=0.01)
    o3.load_state_arrays(state, o2.step_count)
    for s in range(3, 5):
        for k, g in grads_at(s).items():
            p3[k].grad = g
        o3.step()

    for k in p1:
        np.testing.assert_array_equal(p1[k].data, p3[k].data)
    for k, v in o1.state_arrays().items():
        np.testing.assert_array_equal(v, o3.state_arrays()[k])


def test_load_state_missing_key_raises():
    p = _param(1.0)
    opt = AdamW({"w": p})
    with pytest.raises(OptimizerError):
        opt.load_state_arrays({"adam.m.w": np.zeros(1)}, 1)


def test_load_state_shape_mismatch_raises():
    p = _param(1.0, shape=(3,))
    opt = AdamW({"w": p})
    bad = {"adam.m.w": np.zeros(2), "adam.v.w": np.zeros(2)}
    with pytest.raises(OptimizerError):
        opt.load_state_arrays(bad, 1)
