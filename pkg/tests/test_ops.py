import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equnet import ops
from equnet.tensor import Tensor, backward
from gradcheck import TOL, gradcheck
from oracles import conv2d_loop, maxpool_loop, upsample_loop

DTYPES = [np.float32, np.float64]


# -- conv2d ------------------------------------------------------------------

@pytest.mark.parametrize("method", ["direct", "fft"])
@pytest.mark.parametrize("k,padding", [(1, 0), (3, 1), (3, 0), (5, 2), (5, 4)])
def test_conv2d_matches_loop(rng, method, k, padding):
    x = rng.standard_normal((2, 3, 7, 9))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    y = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                   Tensor(b, dtype=np.float64), padding=padding, method=method)
    np.testing.assert_allclose(y.data, conv2d_loop(x, w, b, padding), rtol=1e-12, atol=1e-12)


def test_conv2d_is_cross_correlation_not_convolution():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    y = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), padding=1).data[0, 0]
    # an impulse picks out the kernel reversed
    np.testing.assert_array_equal(y, w[0, 0, ::-1, ::-1])


def test_conv2d_translation_exact(rng):
    x = np.zeros((1, 2, 16, 16))
    x[..., 4:9, 3:8] = rng.standard_normal((1, 2, 5, 5))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), dtype=np.float64)
    y0 = ops.conv2d(Tensor(x, dtype=np.float64), w, padding=1, method="direct").data
    y1 = ops.conv2d(Tensor(np.roll(x, (2, 3), axis=(2, 3)), dtype=np.float64), w, padding=1, method="direct").data
    np.testing.assert_array_equal(np.roll(y0, (2, 3), axis=(2, 3)), y1)


@pytest.mark.parametrize("bad", [
    dict(stride=2),
    dict(padding=3),
])
def test_conv2d_rejects_bad_arguments(bad):
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), **bad)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        ops.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv2d_unknown_method():
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), method="winograd")


def test_fft_and_direct_gradients_agree(rng):
    x = rng.standard_normal((2, 3, 12, 10))
    w = rng.standard_normal((2, 3, 5, 5))
    grads = {}
    for method in ("direct", "fft"):
        xt = Tensor(x, requires_grad=True, dtype=np.float64)
        wt = Tensor(w, requires_grad=True, dtype=np.float64)
        y = ops.conv2d(xt, wt, padding=2, method=method)
        backward(ops.sum(y * y))
        grads[method] = (xt.grad, wt.grad)
    for a, b in zip(grads["direct"], grads["fft"]):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(3, 9), w=st.integers(3, 9), cin=st.integers(1, 3), cout=st.integers(1, 3),
    k=st.sampled_from([1, 3]), seed=st.integers(0, 2**16),
)
def test_conv2d_same_padding_property(h, w, cin, cout, k, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, cin, h, w))
    wt = r.standard_normal((cout, cin, k, k))
    y = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(wt, dtype=np.float64), padding=k // 2)
    assert y.shape == (1, cout, h, w)
    np.testing.assert_allclose(y.data, conv2d_loop(x, wt, None, k // 2), atol=1e-12)


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("method,k", [("direct", 3), ("fft", 5)])
def test_conv2d_gradcheck(rng, dtype, method, k):
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    err = gradcheck(lambda a, c, d: ops.conv2d(a, c, d, padding=k // 2, method=method), [x, w, b], dtype, rng)
    assert err < TOL[dtype]


# -- pooling and upsampling --------------------------------------------------

def test_maxpool_matches_window_max(rng):
    x = rng.standard_normal((2, 3, 4, 6, 8))
    np.testing.assert_array_equal(ops.maxpool2(Tensor(x, dtype=np.float64)).data, maxpool_loop(x))


def test_maxpool_rejects_odd_sizes():
    with pytest.raises(ValueError):
        ops.maxpool2(Tensor(np.ones((1, 1, 5, 4))))


@pytest.mark.parametrize("dtype", DTYPES)
def test_maxpool_gradcheck(rng, separated_values, dtype):
    x = separated_values(rng, (2, 2, 4, 6))
    assert gradcheck(ops.maxpool2, [x], dtype, rng) < TOL[dtype]


def test_upsample_hand_values():
    x = Tensor(np.array([[[[0.0, 4.0], [8.0, 12.0]]]]), dtype=np.float64)
    y = ops.bilinear_upsample2(x).data[0, 0]
    np.testing.assert_allclose(y[0], [0.0, 1.0, 3.0, 4.0])
    np.testing.assert_allclose(y[:, 0], [0.0, 2.0, 6.0, 8.0])
    np.testing.assert_allclose(y[1, 1], 0.75 * 0.75 * 0 + 0.75 * 0.25 * 4 + 0.25 * 0.75 * 8 + 0.25 * 0.25 * 12)


def test_upsample_matches_loop(rng):
    x = rng.standard_normal((2, 3, 2, 5, 3))
    np.testing.assert_allclose(ops.bilinear_upsample2(Tensor(x, dtype=np.float64)).data, upsample_loop(x), atol=1e-14)


def test_upsample_preserves_constants():
    y = ops.bilinear_upsample2(Tensor(np.full((1, 1, 3, 3), 2.5), dtype=np.float64)).data
    np.testing.assert_allclose(y, 2.5)


def test_upsample_commutes_with_quarter_turn(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    up = lambda a: ops.bilinear_upsample2(Tensor(a, dtype=np.float64)).data
    np.testing.assert_allclose(up(np.rot90(x, axes=(2, 3))), np.rot90(up(x), axes=(2, 3)), atol=1e-14)


@pytest.mark.parametrize("dtype", DTYPES)
def test_upsample_gradcheck(rng, dtype):
    assert gradcheck(ops.bilinear_upsample2, [rng.standard_normal((2, 2, 3, 4))], dtype, rng) < TOL[dtype]


# -- batch norm ----------------------------------------------------------------

def test_batchnorm_training_normalises_and_tracks(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    rm, rv = np.zeros(3), np.ones(3)
    y = ops.batchnorm(Tensor(x, dtype=np.float64), Tensor(np.ones(3), dtype=np.float64),
                      Tensor(np.zeros(3), dtype=np.float64), rm, rv, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    y = ops.batchnorm(Tensor(x, dtype=np.float64), Tensor(np.ones(2), dtype=np.float64),
                      Tensor(np.zeros(2), dtype=np.float64), rm, rv, training=False, eps=0.0).data
    np.testing.assert_allclose(y, (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv).reshape(1, 2, 1, 1))


def test_batchnorm_pools_statistics_over_group_axis(rng):
    x = rng.standard_normal((2, 3, 4, 5, 5))
    rm, rv = np.zeros(3), np.ones(3)
    y = ops.batchnorm(Tensor(x, dtype=np.float64), Tensor(np.ones(3), dtype=np.float64),
                      Tensor(np.zeros(3), dtype=np.float64), rm, rv, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3, 4)), 0, atol=1e-12)


@pytest.mark.parametrize("dtype", DTYPES)
def test_batchnorm_gradcheck(rng, dtype):
    def f(x, g, b):
        return ops.batchnorm(x, g, b, np.zeros(3), np.ones(3), training=True)
    arrays = [rng.standard_normal((3, 3, 4, 4)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]
    assert gradcheck(f, arrays, dtype, rng) < TOL[dtype]


# -- elementwise ---------------------------------------------------------------

@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("op", ["sigmoid", "softmax_channels"])
def test_smooth_elementwise_gradcheck(rng, dtype, op):
    fn = getattr(ops, op)
    assert gradcheck(fn, [rng.standard_normal((2, 3, 4, 4))], dtype, rng) < TOL[dtype]


@pytest.mark.parametrize("dtype", DTYPES)
def test_relu_gradcheck_off_the_kink(rng, separated_values, dtype):
    assert gradcheck(ops.relu, [separated_values(rng, (2, 3, 4))], dtype, rng) < TOL[dtype]


def test_sigmoid_is_stable_for_large_inputs():
    y = ops.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]), dtype=np.float64)).data
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])


def test_softmax_sums_to_one(rng):
    y = ops.softmax_channels(Tensor(rng.standard_normal((2, 5, 3, 3)) * 50, dtype=np.float64)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0)


def test_concat_channels_gradient_splits(rng):
    a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
    y = ops.concat_channels(a, b)
    assert y.shape == (1, 6, 3, 3)
    backward(ops.sum(y))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
