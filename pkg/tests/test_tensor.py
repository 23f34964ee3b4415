"""Autodiff engine: forward hand values, gradient oracles, tape semantics."""

import numpy as np
import pytest
from conftest import fdcheck
from numpy.testing import assert_allclose

from raad.errors import ContractError, DimensionError, ParameterError
from raad.optim import AdamState, adam_step
from raad.tensor import (Tape, Tensor, avg_pool2d, backward, bilinear_resize,
                         bilinear_resize_array, channel_slice, conv2d, mse_mean,
                         relu, tensor_sum, topk_mean)


def test_conv_ones_kernel():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))),
                 Tensor(np.zeros(1)))
    assert_allclose(out.data, [[[[9.0]]]])


def test_conv_valid_windows():
    x = Tensor(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = conv2d(x, w, Tensor(np.zeros(1)))
    assert_allclose(out.data[0, 0], [[12.0, 16.0], [24.0, 28.0]])


def test_conv_identity_1x1():
    x = np.random.default_rng(3).normal(size=(2, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    assert_allclose(out.data, x)


def test_conv_bias_added():
    out = conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((2, 1, 1, 1))),
                 Tensor(np.array([1.5, -2.0])))
    assert_allclose(out.data[0, 0], np.full((2, 2), 1.5))
    assert_allclose(out.data[0, 1], np.full((2, 2), -2.0))


def test_conv_linearity():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    a = conv2d(Tensor(2.5 * x), Tensor(w), Tensor(np.zeros(3)), padding=1)
    b = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), padding=1)
    assert_allclose(a.data, 2.5 * b.data, rtol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(DimensionError, match="channel"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))),
               Tensor(np.zeros(1)))
    with pytest.raises(DimensionError, match="spatial"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))),
               Tensor(np.zeros(1)))
    with pytest.raises(ParameterError):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))),
               Tensor(np.zeros(1)), stride=0)


def test_avg_pool_hand_value():
    out = avg_pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2)
    assert_allclose(out.data, [[[[2.5]]]])


def test_avg_pool_constant_preserved():
    x = Tensor(np.full((1, 2, 6, 6), 3.25))
    assert_allclose(avg_pool2d(x, 2, 2).data, np.full((1, 2, 3, 3), 3.25))


def test_avg_pool_identity_k1():
    x = np.random.default_rng(0).normal(size=(1, 1, 4, 4))
    assert_allclose(avg_pool2d(Tensor(x), 1, 1).data, x)


def test_avg_pool_errors():
    with pytest.raises(ParameterError):
        avg_pool2d(Tensor(np.zeros((1, 1, 4, 4))), 0)
    with pytest.raises(DimensionError):
        avg_pool2d(Tensor(np.zeros((1, 1, 2, 2))), 3)


def test_relu_values_and_grad_at_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(relu(x))
    assert_allclose(loss.item(), 2.0)
    backward(loss, tape)
    assert_allclose(x.grad, [0.0, 0.0, 1.0])  # subgradient at 0 is 0


def test_bilinear_identity():
    x = np.random.default_rng(1).normal(size=(1, 2, 5, 7))
    out = bilinear_resize(Tensor(x), 5, 7)
    assert_allclose(out.data, x)


def test_bilinear_corners_and_center():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = bilinear_resize(x, 3, 3).data[0, 0]
    assert_allclose(out[0, 0], 1.0)
    assert_allclose(out[0, 2], 2.0)
    assert_allclose(out[2, 0], 3.0)
    assert_allclose(out[2, 2], 4.0)
    assert_allclose(out[1, 1], 2.5)


def test_bilinear_constant_exact():
    x = np.full((2, 3, 4, 4), 0.3183098861837907)
    out = bilinear_resize(Tensor(x), 13, 9).data
    assert np.all(out == 0.3183098861837907)  # bitwise, not approximate


def test_bilinear_resize_array_matches_op():
    x = np.random.default_rng(2).normal(size=(1, 1, 6, 5))
    assert_allclose(bilinear_resize(Tensor(x), 11, 3).data[0, 0],
                    bilinear_resize_array(x[0, 0], 11, 3))


def test_mse_hand_value_and_grads():
    a = Tensor(np.array([1.0, 3.0]), requires_grad=True)
    b = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with Tape() as tape:
        loss = mse_mean(a, b)
    assert_allclose(loss.item(), 2.5)
    backward(loss, tape)
    assert_allclose(a.grad, [1.0, 2.0])
    assert_allclose(b.grad, [-1.0, -2.0])


def test_mse_zero_on_identical():
    x = np.random.default_rng(4).normal(size=(3, 4))
    assert mse_mean(Tensor(x), Tensor(x.copy())).item() == 0.0


def test_mse_shape_error():
    with pytest.raises(DimensionError):
        mse_mean(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_topk_mean_selects_largest():
    d = Tensor(np.arange(1.0, 11.0).reshape(2, 5), requires_grad=True)
    with Tape() as tape:
        loss = topk_mean(d, 1)
    assert loss.item() == 10.0
    backward(loss, tape)
    assert int(np.count_nonzero(d.grad)) == 1
    assert d.grad[1, 4] == 1.0


def test_topk_mean_tie_break_first_index():
    x = Tensor(np.array([5.0, 5.0, 5.0, 1.0]), requires_grad=True)
    with Tape() as tape:
        loss = topk_mean(x, 2)
    backward(loss, tape)
    assert_allclose(x.grad, [0.5, 0.5, 0.0, 0.0])


def test_topk_k_bounds():
    with pytest.raises(ParameterError):
        topk_mean(Tensor(np.zeros(3)), 4)
    with pytest.raises(ParameterError):
        topk_mean(Tensor(np.zeros(3)), 0)


def test_channel_slice_grad_routing():
    x = Tensor(np.random.default_rng(6).normal(size=(1, 4, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(channel_slice(x, 1, 3))
    backward(loss, tape)
    assert np.all(x.grad[:, 1:3] == 1.0)
    assert np.all(x.grad[:, 0] == 0.0)
    assert np.all(x.grad[:, 3] == 0.0)


def test_sum_grad_is_ones():
    x = Tensor(np.random.default_rng(7).normal(size=(3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(x)
    backward(loss, tape)
    assert_allclose(x.grad, np.ones((3, 2)))


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = x + 1.0
    with pytest.raises(ContractError):
        backward(y, tape)


def test_detached_tensor_gets_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3))  # detached
    with Tape() as tape:
        loss = mse_mean(x * 2.0, c)
    backward(loss, tape)
    assert x.grad is not None
    assert c.grad is None


def test_repeated_backward_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(x * 3.0)
    backward(loss, tape)
    g1 = x.grad.copy()
    backward(loss, tape)
    assert_allclose(x.grad, 2.0 * g1)


def test_tape_sum_linearity():
    xv = np.random.default_rng(8).normal(size=(2, 3))
    x1 = Tensor(xv, requires_grad=True)
    with Tape() as tape:
        la = tensor_sum(x1 * x1)
        lb = mse_mean(x1, Tensor(np.zeros((2, 3))))
        total = la + lb
    backward(total, tape)
    combined = x1.grad.copy()

    xa = Tensor(xv, requires_grad=True)
    with Tape() as ta:
        backward(tensor_sum(xa * xa), ta)
    xb = Tensor(xv, requires_grad=True)
    with Tape() as tb:
        backward(mse_mean(xb, Tensor(np.zeros((2, 3)))), tb)
    assert_allclose(combined, xa.grad + xb.grad, rtol=1e-12)


def test_no_tape_means_no_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0  # outside any tape
    with Tape() as tape:
        z = y + 1.0
        loss = tensor_sum(z)
    backward(loss, tape)
    assert x.grad is None  # the producing op of y was never recorded


# ---- randomized gradient checks per op (the oracle suite) ----


def _proj_loss(t, seed):
    proj = Tensor(np.random.default_rng(seed).normal(size=t.shape))
    return tensor_sum(t * proj)


def test_gradcheck_conv2d_random_shapes():
    rng = np.random.default_rng(11)
    for trial in range(8):
        n = int(rng.integers(1, 3))
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 4))
        k = int(rng.choice([1, 2, 3, 5]))
        stride = int(rng.choice([1, 2]))
        pad = int(rng.integers(0, 3))
        h = k + int(rng.integers(0, 5))
        w = k + int(rng.integers(0, 5))
        arrays = {
            "x": rng.normal(size=(n, cin, h, w)),
            "w": rng.normal(size=(cout, cin, k, k)),
            "b": rng.normal(size=cout),
        }

        def build(ts):
            out = conv2d(ts["x"], ts["w"], ts["b"], stride=stride, padding=pad)
            return _proj_loss(out, 100 + trial)

        fdcheck(build, arrays, ["x", "w", "b"], max_entries=25, seed=trial)


def test_gradcheck_avg_pool_random_shapes():
    rng = np.random.default_rng(12)
    for trial in range(6):
        k = int(rng.choice([1, 2, 3]))
        stride = int(rng.choice([1, 2]))
        h = k + int(rng.integers(0, 5))
        w = k + int(rng.integers(0, 5))
        arrays = {"x": rng.normal(size=(1, int(rng.integers(1, 3)), h, w))}

        def build(ts):
            return _proj_loss(avg_pool2d(ts["x"], k, stride), 200 + trial)

        fdcheck(build, arrays, ["x"], max_entries=30, seed=trial)


def test_gradcheck_bilinear_random_shapes():
    rng = np.random.default_rng(13)
    for trial in range(6):
        h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        oh, ow = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        arrays = {"x": rng.normal(size=(1, 2, h, w))}

        def build(ts):
            return _proj_loss(bilinear_resize(ts["x"], oh, ow), 300 + trial)

        fdcheck(build, arrays, ["x"], max_entries=30, seed=trial)


def test_gradcheck_relu_mse_topk():
    rng = np.random.default_rng(14)
    for trial in range(6):
        shape = tuple(int(v) for v in rng.integers(2, 5, size=2))
        arrays = {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}

        def build(ts):
            r = relu(ts["a"] - ts["b"])
            # shift away from the relu kink so finite differences are clean
            return mse_mean(r + 10.0, ts["b"]) + topk_mean(ts["a"] * ts["a"], 3)

        fdcheck(build, arrays, ["a", "b"], max_entries=16, seed=trial)


# ---- optimizer ----


def test_adam_zero_grad_fresh_state_no_move():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adam_step({"p": p}, AdamState(lr=1e-3))
    assert_allclose(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude():
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.ones(1)
    adam_step({"p": p}, AdamState(lr=1e-3))
    # bias-corrected first step is lr / (1 + eps)
    assert_allclose(p.data, [0.5 - 1e-3 / (1.0 + 1e-8)], rtol=1e-12)
    assert p.grad is None  # cleared after the step


def test_adam_missing_grad_raises():
    p = Tensor(np.array([0.5]), requires_grad=True)
    with pytest.raises(ContractError):
        adam_step({"p": p}, AdamState(lr=1e-3))


def test_adam_descends_quadratic():
    p = Tensor(np.array([3.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    values = []
    for _ in range(60):
        with Tape() as tape:
            loss = mse_mean(p, Tensor(np.zeros(1)))
        values.append(loss.item())
        backward(loss, tape)
        adam_step({"p": p}, state)
    assert values[-1] < 0.05 * values[0]
