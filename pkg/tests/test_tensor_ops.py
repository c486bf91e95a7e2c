import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dvstn import tensor_ops as ops
from dvstn.errors import ConfigurationError, DataError, DimensionError


def conv(x, w, b=None, stride=1, padding=0, depthwise=False):
    p = ops.ConvParams(w.shape[0], w.shape[2:], stride, padding, depthwise)
    return ops.conv2d(x, w, b, p)


# conv2d

def test_conv_identity_1x1(rng):
    x = rng.normal(size=(2, 1, 5, 7)).astype(np.float32)
    y = conv(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    assert np.array_equal(x, y)


def test_conv_all_ones_sums_to_nine():
    y = conv(np.ones((1, 1, 4, 4), np.float32), np.ones((1, 1, 3, 3), np.float32))
    assert y.shape == (1, 1, 2, 2)
    assert np.all(y == 9.0)


def test_conv_entry_shape(rng):
    x = rng.random((1, 10, 32, 32), dtype=np.float32)
    w = rng.normal(size=(24, 10, 7, 7)).astype(np.float32)
    assert conv(x, w, np.zeros(24, np.float32), stride=2, padding=3).shape == (1, 24, 16, 16)


def test_conv_impulse_places_kernel_without_flip():
    x = np.zeros((1, 1, 5, 5), np.float32)
    x[0, 0, 2, 2] = 1
    k = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    y = conv(x, k)[0, 0]
    # cross-correlation: output (i, j) sees input (i+a, j+b) weighted by k[a, b]
    assert np.array_equal(y, k[0, 0, ::-1, ::-1])
    yp = conv(x, k, padding=1)[0, 0]
    assert yp[1, 1] == k[0, 0, 2, 2] and yp[3, 3] == k[0, 0, 0, 0] and yp[2, 2] == k[0, 0, 1, 1]


def test_conv_matches_naive_loop(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    y = conv(x, w, b, stride=(2, 1), padding=(1, 0))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
    ref = np.zeros_like(y)
    for n in range(2):
        for o in range(4):
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, j:j + 2] * w[o]).sum() + b[o]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_conv_weight_shape_mismatch_names_layer():
    p = ops.ConvParams(2, 3)
    with pytest.raises(DimensionError, match=r"\[c1\]"):
        ops.conv2d(np.ones((1, 3, 5, 5)), np.ones((2, 4, 3, 3)), None, p, name="c1")


def test_conv_non_positive_extent():
    with pytest.raises(ConfigurationError):
        conv(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


def test_conv_rejects_nan():
    x = np.ones((1, 1, 3, 3))
    x[0, 0, 1, 1] = np.nan
    with pytest.raises(DataError):
        conv(x, np.ones((1, 1, 1, 1)))


def test_convparams_validation():
    with pytest.raises(ConfigurationError):
        ops.ConvParams(4, 0)
    with pytest.raises(ConfigurationError):
        ops.ConvParams(4, 3, padding=-1)
    assert ops.ConvParams(4, 3).kernel == (3, 3)


# depthwise

def test_depthwise_identity(rng):
    x = rng.normal(size=(1, 3, 4, 4)).astype(np.float32)
    y = conv(x, np.ones((3, 1, 1, 1), np.float32), np.zeros(3, np.float32), depthwise=True)
    assert np.array_equal(x, y)


def test_depthwise_per_channel_sums():
    x = np.stack([np.ones((3, 3)), 2 * np.ones((3, 3))])[None].astype(np.float32)
    y = conv(x, np.ones((2, 1, 3, 3), np.float32), depthwise=True)
    assert y.shape == (1, 2, 1, 1)
    assert y.ravel().tolist() == [9.0, 18.0]


def test_depthwise_shape(rng):
    x = rng.random((1, 48, 16, 16), dtype=np.float32)
    assert conv(x, np.ones((48, 1, 3, 3), np.float32), padding=1, depthwise=True).shape == (1, 48, 16, 16)


@given(c=st.integers(1, 4), k=st.integers(1, 3), s=st.integers(1, 2), p=st.integers(0, 1), seed=st.integers(0, 99))
def test_depthwise_equals_independent_convs(c, k, s, p, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, c, 7, 6)).astype(np.float32)
    w = r.normal(size=(c, 1, k, k)).astype(np.float32)
    b = r.normal(size=c).astype(np.float32)
    y = conv(x, w, b, s, p, depthwise=True)
    for ch in range(c):
        ref = conv(x[:, ch:ch + 1], w[ch:ch + 1], b[ch:ch + 1], s, p)
        np.testing.assert_allclose(y[:, ch:ch + 1], ref, rtol=1e-6, atol=1e-6)


def test_depthwise_channel_mismatch():
    with pytest.raises(DimensionError):
        ops.depthwise_conv2d(np.ones((1, 3, 4, 4)), np.ones((2, 1, 3, 3)), None, ops.ConvParams(3, 3, depthwise=True))


# batchnorm

def bn(gamma, beta, mean, var, eps):
    a = lambda v: np.atleast_1d(np.asarray(v, np.float64))
    return ops.BatchNormParams(a(gamma), a(beta), a(mean), a(var), eps)


def test_batchnorm_identity(rng):
    x = rng.normal(size=(1, 1, 3, 3)).astype(np.float32)
    assert np.array_equal(ops.batchnorm_infer(x, bn(1, 0, 0, 1, 0.0)), x)


def test_batchnorm_hand_value():
    y = ops.batchnorm_infer(np.full((1, 1, 1, 1), 2.0, np.float32), bn(3, 1, 1, 4, 0.0))
    assert y.item() == pytest.approx(2.5, abs=1e-7)


def test_batchnorm_constant_at_mean_gives_beta():
    x = np.stack([np.full((4, 4), 3.0), np.full((4, 4), -1.0)])[None].astype(np.float32)
    y = ops.batchnorm_infer(x, bn([2, 5], [0.25, -0.5], [3, -1], [1, 2], 1e-5))
    assert np.allclose(y[0, 0], 0.25) and np.allclose(y[0, 1], -0.5)


def test_batchnorm_negative_variance_rejected():
    with pytest.raises(DataError):
        bn(1, 0, 0, -0.1, 1e-5)


def test_batchnorm_channel_mismatch():
    with pytest.raises(DimensionError):
        ops.batchnorm_infer(np.ones((1, 2, 2, 2)), bn(1, 0, 0, 1, 1e-5))


@given(seed=st.integers(0, 1000))
def test_batchnorm_inverse_recovers_input(seed):
    r = np.random.default_rng(seed)
    c = 3
    p = bn(r.uniform(0.2, 3, c), r.normal(size=c), r.normal(size=c), r.uniform(1e-3, 4, c), 1e-5)
    x = r.normal(size=(2, c, 3, 3)).astype(np.float32)
    y = ops.batchnorm_infer(x, p).astype(np.float64)
    sd = np.sqrt(p.var + p.eps)[None, :, None, None]
    back = (y - p.beta[None, :, None, None]) * sd / p.gamma[None, :, None, None] + p.mean[None, :, None, None]
    np.testing.assert_allclose(back, x, rtol=1e-5, atol=1e-5)


# pooling

def test_max_pool_small():
    x = np.array([[1, 2], [3, 4]], np.float32)[None, None]
    assert ops.pool2d(x, "max", 2, 2).item() == 4


def test_avg_pool_small():
    x = np.array([[1, 2], [3, 4]], np.float32)[None, None]
    assert ops.pool2d(x, "avg", 2, 2).item() == 2.5


def test_global_average_pool_shape(rng):
    assert ops.global_avg_pool(rng.random((1, 7, 5, 3))).shape == (1, 7, 1, 1)


def test_avg_pool_excludes_padding():
    x = np.ones((1, 1, 3, 3), np.float32)
    y = ops.pool2d(x, "avg", 3, 1, padding=1)
    assert np.allclose(y, 1.0)


def test_max_pool_padding_never_wins():
    x = -np.ones((1, 1, 3, 3), np.float32)
    assert np.all(ops.pool2d(x, "max", 3, 1, padding=1) == -1)


def test_ceil_mode_extent():
    assert ops.pool_output_extent(112, 3, 2, 0, ceil_mode=False) == 55
    assert ops.pool_output_extent(112, 3, 2, 0, ceil_mode=True) == 56
    assert ops.pool_output_extent(2, 3, 2, 0, ceil_mode=True) == 0
    # a last window that would start in the padding is dropped
    assert ops.pool_output_extent(4, 2, 2, 1, ceil_mode=True) == 3


def test_ceil_mode_partial_window(rng):
    x = rng.normal(size=(1, 1, 4, 4)).astype(np.float32)
    y = ops.pool2d(x, "max", 3, 2, ceil_mode=True)
    assert y.shape == (1, 1, 2, 2)
    assert y[0, 0, 1, 1] == x[0, 0, 2:, 2:].max()
    ya = ops.pool2d(x, "avg", 3, 2, ceil_mode=True)
    assert ya[0, 0, 1, 1] == pytest.approx(x[0, 0, 2:, 2:].mean(), rel=1e-6)


def test_pool_non_positive_extent():
    with pytest.raises(ConfigurationError):
        ops.pool2d(np.ones((1, 1, 2, 2)), "max", 3, 1)


# fully connected, relu, softmax, concat

def test_fc_identity(rng):
    x = rng.normal(size=(1, 4))
    assert np.allclose(ops.fully_connected(x, np.eye(4), np.zeros(4)), x)


def test_fc_hand_value():
    assert ops.fully_connected(np.array([[3.0, 4.0]]), np.array([[1.0, 2.0]]), np.array([1.0])).tolist() == [[12.0]]


def test_fc_flattens_and_checks():
    x = np.ones((2, 3, 2, 2))
    assert ops.fully_connected(x, np.ones((2, 12)), np.zeros(2)).shape == (2, 2)
    with pytest.raises(DimensionError):
        ops.fully_connected(x, np.ones((2, 11)), np.zeros(2))


def test_relu():
    assert ops.relu(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]


def test_softmax_symmetric():
    assert ops.softmax(np.array([0.0, 0.0])).tolist() == [0.5, 0.5]


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(-100, 100)))
def test_softmax_sums_to_one(z):
    s = ops.softmax(z)
    assert np.all(s > 0)
    assert abs(s.sum() - 1) <= 1e-6


def test_softmax_large_logits_stable():
    assert np.allclose(ops.softmax(np.array([1000.0, 0.0])), [1.0, 0.0])


def test_concat_shapes_and_order(rng):
    a, b = rng.random((1, 2, 4, 4)), rng.random((1, 3, 4, 4))
    y = ops.channel_concat([a, b])
    assert y.shape == (1, 5, 4, 4)
    assert np.array_equal(y[:, :2], a) and np.array_equal(y[:, 2:], b)


def test_concat_spatial_mismatch():
    with pytest.raises(DimensionError, match=r"\[cat\]"):
        ops.channel_concat([np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 4))], name="cat")


# tensors

def test_tensor_validation():
    with pytest.raises(DimensionError):
        ops.as_tensor(np.ones((3, 3)))
    with pytest.raises(DimensionError):
        ops.as_tensor(np.ones((1, 0, 3, 3)))
    with pytest.raises(DataError):
        ops.as_tensor(np.full((1, 1, 1, 1), np.inf))


@given(seed=st.integers(0, 50))
def test_primitives_are_pure(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(1, 2, 6, 6)).astype(np.float32)
    w = r.normal(size=(3, 2, 3, 3)).astype(np.float32)
    x0 = x.copy()
    a, b = conv(x, w, padding=1), conv(x, w, padding=1)
    assert np.array_equal(a, b) and np.array_equal(x, x0)
    assert np.array_equal(ops.pool2d(x, "avg", 3, 2, 1), ops.pool2d(x, "avg", 3, 2, 1))


def test_outputs_finite_for_finite_inputs(rng):
    x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32) * 1e3
    for y in (conv(x, rng.normal(size=(2, 2, 3, 3)).astype(np.float32)),
              ops.pool2d(x, "max", 2, 2), ops.pool2d(x, "avg", 3, 1, 1, ceil_mode=True)):
        assert np.isfinite(y).all()


def test_concurrent_calls_agree(rng):
    x = rng.normal(size=(1, 4, 16, 16)).astype(np.float32)
    w = rng.normal(size=(8, 4, 3, 3)).astype(np.float32)
    ref = conv(x, w, padding=1)
    results = [None] * 8

    def work(i):
        results[i] = conv(x, w, padding=1)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(np.array_equal(r, ref) for r in results)


def test_mac_tally_records_executed_work():
    with ops.count_executed_macs() as tally:
        conv(np.ones((1, 2, 4, 4), np.float32), np.ones((3, 2, 3, 3), np.float32), padding=1)
    assert tally.total == 16 * 3 * 2 * 9
