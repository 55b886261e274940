import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drpriv import _pykernels, kernels
from drpriv import nn_core as nn


def small_net(layers, input_shape):
    return nn.NetworkSpec.build(input_shape, layers)


def test_init_bound_and_zero_bias():
    net = small_net([nn.dense(4)], (4,))
    p = nn.init_params(net, 3)
    assert np.all(np.abs(p["0.weight"]) <= math.sqrt(6 / 8))
    assert math.sqrt(6 / 8) == pytest.approx(0.866, abs=1e-3)
    assert np.all(p["0.bias"] == 0)


def test_init_deterministic():
    net = small_net([nn.conv2d(3, 3), nn.tanh(), nn.flatten(), nn.dense(2)], (1, 6, 6))
    a, b = nn.init_params(net, 5), nn.init_params(net, 5)
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_dense_hand_computed():
    net = small_net([nn.dense(2)], (2,))
    params = {"0.weight": np.eye(2), "0.bias": np.array([0.5, -0.5])}
    out, _ = nn.forward(net, params, np.array([[1.0, 2.0]]))
    assert np.array_equal(out, [[1.5, 1.5]])


def test_identity_conv_kernel():
    net = small_net([nn.conv2d(1, 1, 1)], (1, 5, 7))
    params = {"0.weight": np.ones((1, 1, 1, 1)), "0.bias": np.zeros(1)}
    x = np.random.default_rng(0).random((3, 1, 5, 7))
    assert np.array_equal(nn.forward(net, params, x)[0], x)


def test_softmax_and_sigmoid_ranges():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=30, size=(50, 6))
    sm = small_net([nn.softmax()], (6,))
    out = nn.forward(sm, {}, x)[0]
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(out >= 0) and np.all(out <= 1)
    mild = nn.forward(sm, {}, x / 30)[0]
    assert np.all((mild > 0) & (mild < 1))
    sg = nn.forward(small_net([nn.sigmoid()], (6,)), {}, x / 10)[0]
    assert np.all((sg > 0) & (sg < 1))


def test_tanh_local_gradient_at_zero():
    net = small_net([nn.tanh()], (1,))
    out, trace = nn.forward(net, {}, np.zeros((1, 1)))
    gin, _ = nn.backward(net, {}, trace, np.ones((1, 1)))
    assert gin[0, 0] == 1.0


def test_zero_output_grad_gives_zero_grads():
    net = small_net([nn.conv2d(2, 3, 2), nn.tanh(), nn.flatten(), nn.dense(3)], (1, 6, 6))
    params = nn.init_params(net, 0)
    x = np.random.default_rng(0).random((2, 1, 6, 6))
    out, trace = nn.forward(net, params, x)
    gin, grads = nn.backward(net, params, trace, np.zeros_like(out))
    assert not gin.any()
    assert all(not g.any() for g in grads.values())


@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("stride", [1, 2])
def test_shape_composition(padding, stride):
    net = small_net([nn.conv2d(4, 3, stride, padding), nn.tanh(), nn.tconv2d(2, 3, stride, padding)],
                    (1, 9, 8))
    x = np.zeros((2, 1, 9, 8))
    out = nn.forward(net, nn.init_params(net, 0), x)[0]
    assert out.shape == (2, *net.output_shape)
    h = nn.conv_output_size(9, 3, stride, padding)
    assert net.layers[0].out_shape[1] == h


def test_same_padding_output_is_ceil():
    net = small_net([nn.conv2d(1, 5, 2)], (1, 23, 16))
    assert net.output_shape == (1, 12, 8)


def test_bad_shapes_rejected():
    with pytest.raises(nn.ShapeError):
        small_net([nn.dense(3)], (1, 4, 4))
    with pytest.raises(nn.ShapeError):
        small_net([nn.reshape((5,))], (4,))
    with pytest.raises(nn.ShapeError):
        small_net([nn.tconv2d(1, 3, 2, output_size=(9, 9))], (1, 3, 3))
    net = small_net([nn.dense(2)], (3,))
    with pytest.raises(nn.ShapeError):
        nn.forward(net, nn.init_params(net, 0), np.zeros((1, 4)))


GRAD_NETS = {
    "dense-tanh-dense": ([nn.dense(5), nn.tanh(), nn.dense(3)], (4,)),
    "sigmoid": ([nn.dense(4), nn.sigmoid()], (3,)),
    "softmax": ([nn.dense(4), nn.softmax(), nn.dense(2)], (3,)),
    "conv-valid": ([nn.conv2d(2, 3, 1, "valid"), nn.tanh(), nn.flatten(), nn.dense(2)], (2, 6, 5)),
    "conv-tconv-stack": ([nn.conv2d(3, 3, 2), nn.tanh(), nn.tconv2d(2, 3, 2, output_size=(7, 6)),
                          nn.sigmoid()], (1, 7, 6)),
    "reshape-tconv": ([nn.dense(12), nn.tanh(), nn.reshape((3, 2, 2)), nn.tconv2d(1, 5, 2), nn.tanh()], (2,)),
}


@pytest.mark.parametrize("name", sorted(GRAD_NETS))
def test_finite_difference(name):
    layers, shape = GRAD_NETS[name]
    net = small_net(layers, shape)
    params = nn.init_params(net, 1)
    for k in params:
        if k.endswith("bias"):
            params[k] = np.random.default_rng(2).normal(scale=0.1, size=params[k].shape)
    x = np.random.default_rng(3).normal(size=(2, *shape))
    report = nn.finite_diff_check(net, params, x, tol=1e-4)
    assert report["pass"], report


def test_finite_difference_detects_corrupt_gradient():
    layers, shape = GRAD_NETS["dense-tanh-dense"]
    net = small_net(layers, shape)
    params = nn.init_params(net, 1)

    def doubled(net, params, trace, g):
        gin, grads = nn.backward(net, params, trace, g)
        return 2 * gin, {k: 2 * v for k, v in grads.items()}

    x = np.random.default_rng(0).normal(size=(2, 4))
    assert not nn.finite_diff_check(net, params, x, grad_fn=doubled)["pass"]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), stride=st.sampled_from([1, 2, 3]), k=st.sampled_from([1, 3, 5]),
       padding=st.sampled_from(["same", "valid"]), h=st.integers(5, 11), w=st.integers(5, 11))
def test_tconv_is_adjoint_of_conv(seed, stride, k, padding, h, w):
    rng = np.random.default_rng(seed)
    conv = small_net([nn.conv2d(3, k, stride, padding)], (2, h, w))
    _, ho, wo = conv.output_shape
    tconv = small_net([nn.tconv2d(2, k, stride, padding, output_size=(h, w))], (3, ho, wo))
    weight = rng.normal(size=(3, 2, k, k))
    x = rng.normal(size=(2, 2, h, w))
    y = rng.normal(size=(2, 3, ho, wo))
    cx = nn.forward(conv, {"0.weight": weight, "0.bias": np.zeros(3)}, x)[0]
    ty = nn.forward(tconv, {"0.weight": weight, "0.bias": np.zeros(2)}, y)[0]
    lhs, rhs = np.vdot(cx, y), np.vdot(x, ty)
    assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), abs(rhs), 1.0)


def test_forward_bit_deterministic():
    layers, shape = GRAD_NETS["conv-tconv-stack"]
    net = small_net(layers, shape)
    params = nn.init_params(net, 9)
    x = np.random.default_rng(0).random((4, *shape))
    a = nn.forward(net, params, x)[0]
    b = nn.forward(net, params, x)[0]
    assert np.array_equal(a, b)


def test_sgd_update_rules():
    p = {"w": np.array([1.0])}
    g = {"w": np.array([2.0])}
    assert nn.sgd_update(p, g, 0.01)["w"][0] == pytest.approx(0.98, abs=1e-15)
    assert np.array_equal(nn.sgd_update(p, g, 0.0)["w"], p["w"])
    back = nn.sgd_update(nn.sgd_update(p, g, 0.5), {"w": -g["w"]}, 0.5)
    assert np.array_equal(back["w"], p["w"])


def test_sgd_update_errors():
    p = {"w": np.ones(2)}
    with pytest.raises(nn.ShapeError):
        nn.sgd_update(p, {"w": np.ones(3)}, 0.1)
    with pytest.raises(nn.DivergenceError):
        nn.sgd_update(p, {"w": np.array([1.0, np.nan])}, 0.1)


@pytest.mark.parametrize("shape", [(4, 1, 12, 12, 8, 5, 2), (2, 3, 7, 9, 4, 3, 1), (3, 2, 10, 10, 5, 5, 3)])
def test_backends_agree(shape):
    if kernels.compiled_backend is None:
        pytest.skip("compiled kernels not built")
    n, c, h, w, o, k, s = shape
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, c, h, w))
    wt = rng.normal(size=(o, c, k, k))
    cb, pb = kernels.compiled_backend, _pykernels
    y1, y2 = cb.conv2d_forward(x, wt, s), pb.conv2d_forward(x, wt, s)
    np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-12)
    gy = rng.normal(size=y1.shape)
    np.testing.assert_allclose(cb.conv2d_backward_input(gy, wt, s, h, w),
                               pb.conv2d_backward_input(gy, wt, s, h, w), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(cb.conv2d_backward_weight(x, gy, s, k, k),
                               pb.conv2d_backward_weight(x, gy, s, k, k), rtol=1e-12, atol=1e-11)


def test_python_backend_adjoint():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 2, 9, 9))
    w = rng.normal(size=(3, 2, 3, 3))
    y = _pykernels.conv2d_forward(x, w, 2)
    g = rng.normal(size=y.shape)
    gx = _pykernels.conv2d_backward_input(g, w, 2, 9, 9)
    assert np.vdot(y, g) == pytest.approx(np.vdot(x, gx), rel=1e-10)
