import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import direct_conv

from treederain.ops import (
    ConvParams,
    ShapeError,
    add,
    add_backward,
    concat_backward,
    concat_channels,
    conv2d_backward,
    conv2d_dilated,
    grad_check,
    relu,
    relu_backward,
)


def identity_kernel(c=1):
    p = ConvParams.zeros(c, c, 3, dtype=np.float64)
    for i in range(c):
        p.weight[i, i, 1, 1] = 1.0
    return p


def test_identity_kernel_returns_input():
    x = np.ones((1, 1, 3, 3))
    np.testing.assert_array_equal(conv2d_dilated(x, identity_kernel(), 1, 1), x)


def test_dilated_all_ones_center_and_corner():
    x = np.ones((1, 1, 5, 5))
    p = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1))
    out = conv2d_dilated(x, p, dilation=2, padding=2)
    ref = direct_conv(x, p.weight, p.bias, 2, 2)
    assert out[0, 0, 2, 2] == ref[0, 0, 2, 2] == 9
    assert out[0, 0, 0, 0] == ref[0, 0, 0, 0] == 4
    np.testing.assert_array_equal(out, ref)


def test_one_by_one_kernel():
    p = ConvParams(np.array([[[[2.0]], [[-1.0]]]]), np.array([0.5]))
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    expected = 2 * x[:, :1] - x[:, 1:] + 0.5
    np.testing.assert_allclose(conv2d_dilated(x, p), expected)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 3),
    c_in=st.integers(1, 3),
    c_out=st.integers(1, 3),
    h=st.integers(1, 8),
    w=st.integers(1, 8),
    dilation=st.integers(1, 3),
    seed=st.integers(0, 2**16),
)
def test_matches_direct_oracle(n, c_in, c_out, h, w, dilation, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c_in, h, w))
    p = ConvParams(rng.normal(size=(c_out, c_in, 3, 3)), rng.normal(size=c_out))
    out = conv2d_dilated(x, p, dilation, dilation)
    assert out.shape == (n, c_out, h, w)
    np.testing.assert_allclose(out, direct_conv(x, p.weight, p.bias, dilation, dilation), atol=1e-6, rtol=0)


@given(h=st.integers(1, 40), w=st.integers(1, 40), d=st.integers(1, 6))
def test_same_resolution_contract(h, w, d):
    x = np.zeros((1, 2, h, w))
    assert conv2d_dilated(x, ConvParams.zeros(3, 2, 3, np.float64), d, d).shape == (1, 3, h, w)


def test_linearity_without_bias(rng):
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
    x, y = rng.normal(size=(2, 2, 7, 6)), rng.normal(size=(2, 2, 7, 6))
    a, b = 1.7, -0.4
    lhs = conv2d_dilated(a * x + b * y, p, 2, 2)
    rhs = a * conv2d_dilated(x, p, 2, 2) + b * conv2d_dilated(y, p, 2, 2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        conv2d_dilated(np.zeros((1, 2, 4, 4)), ConvParams.zeros(1, 3, 3), 1, 1)


def test_output_below_one_pixel_raises():
    with pytest.raises(ShapeError):
        conv2d_dilated(np.zeros((1, 1, 2, 2)), ConvParams.zeros(1, 1, 3), 2, 0)


def test_non_4d_input_raises():
    with pytest.raises(ShapeError):
        conv2d_dilated(np.zeros((2, 4, 4)), ConvParams.zeros(1, 2, 3), 1, 1)


def test_backward_zero_grad_output(rng):
    p = ConvParams(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
    x = rng.normal(size=(1, 2, 5, 5))
    gx = conv2d_backward(x, p, 1, 1, np.zeros((1, 2, 5, 5)))
    assert not gx.any()
    assert not p.grad_weight.any() and not p.grad_bias.any()


def test_backward_scalar_chain_rule():
    w, g, xv = 1.5, -2.0, 0.25
    p = ConvParams(np.full((1, 1, 1, 1), w), np.zeros(1))
    gx = conv2d_backward(np.full((1, 1, 1, 1), xv), p, 1, 0, np.full((1, 1, 1, 1), g))
    assert gx.item() == w * g
    assert p.grad_weight.item() == xv * g
    assert p.grad_bias.item() == g


def test_backward_accumulates(rng):
    p = ConvParams(rng.normal(size=(1, 1, 3, 3)), np.zeros(1))
    x = rng.normal(size=(1, 1, 4, 4))
    g = rng.normal(size=(1, 1, 4, 4))
    conv2d_backward(x, p, 1, 1, g)
    once = p.grad_weight.copy()
    conv2d_backward(x, p, 1, 1, g)
    np.testing.assert_allclose(p.grad_weight, 2 * once)


def test_backward_shape_mismatch(rng):
    p = ConvParams.zeros(2, 2, 3, np.float64)
    with pytest.raises(ShapeError):
        conv2d_backward(np.zeros((1, 2, 4, 4)), p, 1, 1, np.zeros((1, 2, 3, 3)))


def test_backward_finite_differences():
    # N=1, C_in=2, C_out=2, 4x4, dilation 2
    rng = np.random.default_rng(3)
    p = ConvParams(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
    x = rng.normal(size=(1, 2, 4, 4))
    w_out = rng.normal(size=(1, 2, 4, 4))

    def fn():
        p.zero_grad()
        out = conv2d_dilated(x, p, 2, 2)
        return float(np.sum(out * w_out)), [conv2d_backward(x, p, 2, 2, w_out), p.grad_weight, p.grad_bias]

    assert grad_check(fn, [x, p.weight, p.bias], 1e-5) < 1e-6


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**16), dilation=st.integers(1, 3), k=st.sampled_from([1, 3]))
def test_backward_is_adjoint(seed, dilation, k):
    # <conv(x), g> == <x, conv^T(g)> with zero bias
    rng = np.random.default_rng(seed)
    pad = dilation if k == 3 else 0
    p = ConvParams(rng.normal(size=(3, 2, k, k)), np.zeros(3))
    x = rng.normal(size=(2, 2, 5, 6))
    g = rng.normal(size=(2, 3, 5, 6))
    lhs = np.sum(conv2d_dilated(x, p, dilation, pad) * g)
    rhs = np.sum(x * conv2d_backward(x, p, dilation, pad, g))
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


def test_float32_path_matches_float64(rng):
    p = ConvParams(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4))
    x = rng.random((2, 3, 9, 7))
    out64 = conv2d_dilated(x, p, 3, 3)
    out32 = conv2d_dilated(x.astype(np.float32), p.astype(np.float32), 3, 3)
    assert out32.dtype == np.float32
    np.testing.assert_allclose(out32, out64, atol=1e-5)


def test_relu_values():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])


def test_relu_positive_identity(rng):
    x = rng.random((1, 2, 3, 3)) + 0.1
    g = rng.normal(size=x.shape)
    np.testing.assert_array_equal(relu(x), x)
    np.testing.assert_array_equal(relu_backward(x, g), g)


def test_relu_backward_zero_at_kink():
    x = np.array([[[[0.0, -1.0, 1.0]]]])
    np.testing.assert_array_equal(relu_backward(x, np.ones_like(x)), [[[[0, 0, 1]]]])


def test_relu_finite_differences(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    x[np.abs(x) < 1e-3] = 0.3
    w_out = rng.normal(size=x.shape)
    err = grad_check(lambda: (float(np.sum(relu(x) * w_out)), [relu_backward(x, w_out)]), [x])
    assert err < 1e-6


def test_concat_shape_and_order(rng):
    a, b = rng.normal(size=(1, 16, 8, 8)), rng.normal(size=(1, 16, 8, 8))
    out = concat_channels(a, b)
    assert out.shape == (1, 32, 8, 8)
    np.testing.assert_array_equal(out[:, 16], b[:, 0])
    np.testing.assert_array_equal(out[:, :16], a)


def test_concat_backward_partitions(rng):
    g = rng.normal(size=(2, 5, 3, 3))
    ga, gb = concat_backward(g, 2)
    np.testing.assert_array_equal(ga, g[:, :2])
    np.testing.assert_array_equal(gb, g[:, 2:])
    assert ga.sum() + gb.sum() == pytest.approx(g.sum())


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        concat_channels(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


def test_add_identities(rng):
    a = rng.normal(size=(1, 2, 3, 3))
    np.testing.assert_array_equal(add(a, np.zeros_like(a)), a)
    np.testing.assert_array_equal(add(a, -a), np.zeros_like(a))
    g = rng.normal(size=a.shape)
    ga, gb = add_backward(g)
    np.testing.assert_array_equal(ga, g)
    np.testing.assert_array_equal(gb, g)


def test_add_mismatch():
    with pytest.raises(ShapeError):
        add(np.zeros((1, 1, 2, 2)), np.zeros((1, 2, 2, 2)))


def test_grad_check_quadratic():
    w = np.array([0.7])
    assert grad_check(lambda: (3.0 * w[0] ** 2, [6.0 * w]), [w]) < 1e-9


def test_grad_check_reports_wrong_gradient():
    w = np.array([0.7])
    assert grad_check(lambda: (3.0 * w[0] ** 2, [5.0 * w]), [w]) > 0.1


def test_grad_check_non_finite():
    w = np.array([1.0])
    with pytest.raises(FloatingPointError):
        grad_check(lambda: (float("nan"), [w]), [w])
