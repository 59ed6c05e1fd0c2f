"""Layer primitives against explicit-loop oracles and finite differences."""
import numpy as np
import pytest

from meegnet import nn
from meegnet.errors import ConfigError, NumericError, ShapeError, StateError
from meegnet.gradcheck import layer_gradient_check


def conv_oracle(x, kernels):
    # y[b,f,h,t] = sum_{c,tau} k[f,c,tau] * x[b,c,h,t + tau - left], zero outside
    b, c, h, w = x.shape
    f, _, _, ksize = kernels.shape
    left = (ksize - 1) // 2
    y = np.zeros((b, f, h, w))
    for t in range(w):
        for tau in range(ksize):
            s = t + tau - left
            if 0 <= s < w:
                y[:, :, :, t] += np.einsum("fc,bch->bfh", kernels[:, :, 0, tau], x[:, :, :, s])
    return y


@pytest.mark.parametrize("ksize,expected", [(1, (0, 0)), (2, (0, 1)), (10, (4, 5)),
                                            (16, (7, 8)), (250, (124, 125))])
def test_same_padding(ksize, expected):
    assert nn.same_padding(ksize) == expected


@pytest.mark.parametrize("ksize", [1, 3, 10, 16, 17, 50, 125])
def test_conv_temporal_matches_loop(rng, ksize):
    x = rng.standard_normal((2, 3, 4, 60))
    k = rng.standard_normal((5, 3, 1, ksize))
    np.testing.assert_allclose(nn.conv_temporal_forward(x, k), conv_oracle(x, k), atol=1e-11)


def test_conv_temporal_delta_kernel_is_identity(rng):
    x = rng.standard_normal((2, 1, 3, 40))
    k = np.zeros((1, 1, 1, 9))
    k[0, 0, 0, 4] = 1.0  # centre tap of an odd kernel
    np.testing.assert_allclose(nn.conv_temporal_forward(x, k), x, atol=1e-12)


def test_conv_temporal_shape_errors(rng):
    with pytest.raises(ShapeError):
        nn.conv_temporal_forward(rng.standard_normal((2, 3, 4, 10)), np.zeros((5, 2, 1, 3)))
    with pytest.raises(ShapeError):
        nn.conv_temporal_forward(rng.standard_normal((3, 4, 10)), np.zeros((5, 3, 1, 3)))


def test_depthwise_matches_loop(rng):
    x = rng.standard_normal((2, 3, 5, 7))
    k = rng.standard_normal((3, 2, 5, 1))
    y = nn.depthwise_conv_forward(x, k)
    assert y.shape == (2, 6, 1, 7)
    for c in range(3):
        for m in range(2):
            ref = (k[c, m, :, 0][None, :, None] * x[:, c]).sum(axis=1)
            np.testing.assert_allclose(y[:, c * 2 + m, 0], ref, atol=1e-12)


def test_depthwise_rejects_wrong_electrode_extent(rng):
    with pytest.raises(ShapeError):
        nn.depthwise_conv_forward(rng.standard_normal((2, 3, 5, 7)), np.zeros((3, 2, 4, 1)))


def test_separable_matches_loop(rng):
    x = rng.standard_normal((2, 4, 1, 30))
    dk = rng.standard_normal((4, 1, 1, 16))
    pw = rng.standard_normal((6, 4))
    y = nn.separable_conv_forward(x, dk, pw)
    mid = np.concatenate([conv_oracle(x[:, c:c + 1], dk[c:c + 1]) for c in range(4)], axis=1)
    np.testing.assert_allclose(y, np.einsum("fc,bchw->bfhw", pw, mid), atol=1e-11)


def test_separable_shape_checks(rng):
    with pytest.raises(ShapeError):
        nn.separable_conv_forward(rng.standard_normal((2, 4, 2, 30)), np.zeros((4, 1, 1, 3)), np.zeros((6, 4)))
    with pytest.raises(ShapeError):
        nn.separable_conv_forward(rng.standard_normal((2, 4, 1, 30)), np.zeros((4, 1, 1, 3)), np.zeros((6, 3)))


def test_batch_norm_train_statistics(rng):
    x = rng.standard_normal((8, 3, 2, 5)) * 4 + 1
    gamma, beta = np.array([1.0, 2.0, 0.5]), np.array([0.0, -1.0, 3.0])
    y, mm, mv = nn.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), training=True)
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))  # biased
    np.testing.assert_allclose(mm, 0.01 * mean, atol=1e-12)
    np.testing.assert_allclose(mv, 0.99 + 0.01 * var, atol=1e-12)
    ref = (x - mean[None, :, None, None]) / np.sqrt(var + 1e-3)[None, :, None, None]
    ref = ref * gamma[None, :, None, None] + beta[None, :, None, None]
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_batch_norm_inference_uses_moving_stats(rng):
    x = rng.standard_normal((4, 2, 1, 3))
    y, mm, mv = nn.batch_norm(x, np.ones(2), np.zeros(2), np.array([1.0, -1.0]),
                              np.array([4.0, 9.0]), training=False)
    np.testing.assert_allclose(y[:, 0], (x[:, 0] - 1) / np.sqrt(4.001))
    np.testing.assert_allclose(mm, [1.0, -1.0])


def test_batch_norm_layer_rejects_nan():
    layer = nn.BatchNorm(2)
    x = np.zeros((1, 2, 1, 3))
    x[0, 1, 0, 2] = np.nan
    with pytest.raises(NumericError):
        layer.forward(x, training=True)


def test_batch_norm_layer_no_update_when_disabled(rng):
    layer = nn.BatchNorm(2)
    layer.update_stats = False
    layer.forward(rng.standard_normal((3, 2, 1, 4)), training=True)
    np.testing.assert_array_equal(layer.buffers["moving_var"], np.ones(2))


def test_elu_values():
    x = np.array([-2.0, -1e-8, 0.0, 1e-12, 3.0])
    np.testing.assert_allclose(nn.elu(x), [np.expm1(-2.0), np.expm1(-1e-8), 0.0, 1e-12, 3.0],
                               rtol=1e-15)
    layer = nn.ELU()
    np.testing.assert_allclose(layer.forward(x.reshape(1, 1, 1, -1)).ravel(), nn.elu(x), rtol=1e-15)


def test_average_pool_drops_remainder():
    x = np.arange(17.0).reshape(1, 1, 1, 17)
    y = nn.average_pool(x, 4)
    np.testing.assert_allclose(y.ravel(), [1.5, 5.5, 9.5, 13.5])
    assert nn.average_pool(np.zeros((1, 1, 1, 125)), 8).shape[-1] == 15
    with pytest.raises(ShapeError):
        nn.average_pool(np.zeros((1, 1, 1, 3)), 4)
    with pytest.raises(ConfigError):
        nn.average_pool(x, 0)


def test_dropout_identity_and_scaling(rng):
    x = np.ones((200, 50))
    assert nn.dropout(x, 0.25, training=False) is x
    y = nn.dropout(x, 0.25, training=True, rng=1)
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
    assert abs((y == 0).mean() - 0.25) < 0.02
    with pytest.raises(ConfigError):
        nn.dropout(x, 1.0)


def test_dropout_layer_frozen_mask_repeats(rng):
    layer = nn.Dropout(0.5, seed=3)
    layer.freeze = True
    x = rng.standard_normal((4, 3, 1, 5))
    np.testing.assert_array_equal(layer.forward(x, training=True), layer.forward(x, training=True))


def test_sigmoid_strictly_inside_unit_interval():
    z = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    p = nn.sigmoid(z)
    assert np.all(p > 0) and np.all(p < 1)
    assert p[2] == 0.5


def test_dense_sigmoid_matches_formula(rng):
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((5, 2))
    b = rng.standard_normal(2)
    np.testing.assert_allclose(nn.dense_sigmoid(x, w, b), 1 / (1 + np.exp(-(x @ w + b))), rtol=1e-12)
    with pytest.raises(ShapeError):
        nn.dense_sigmoid(x, w[:4], b)


def test_backward_before_forward_raises():
    with pytest.raises(StateError):
        nn.Dense(3, 2).backward(np.zeros((1, 2)))


def _init(layer, rng):
    for key, arr in layer.params.items():
        layer.params[key] = rng.standard_normal(arr.shape) * 0.5 + (1.0 if key == "gamma" else 0.0)
    return layer


LAYERS = [
    ("conv_direct", lambda: nn.ConvTemporal(1, 3, 7), (2, 1, 3, 20)),
    ("conv_fft", lambda: nn.ConvTemporal(2, 3, 25), (2, 2, 3, 30)),
    ("depthwise", lambda: nn.DepthwiseConv(3, 2, 4), (2, 3, 4, 9)),
    ("separable", lambda: nn.SeparableConv(4, 3, 16), (2, 4, 1, 25)),
    ("bn_train", lambda: nn.BatchNorm(3), (4, 3, 2, 5)),
    ("elu", lambda: nn.ELU(), (2, 3, 1, 11)),
    ("pool", lambda: nn.AveragePool(4), (2, 3, 1, 13)),
    ("dropout", lambda: nn.Dropout(0.25, seed=1), (2, 3, 1, 8)),
    ("dense", lambda: nn.Dense(12, 4), (3, 3, 1, 4)),
    ("sigmoid", lambda: nn.Sigmoid(), (3, 4)),
]


@pytest.mark.parametrize("name,factory,shape", LAYERS, ids=[l[0] for l in LAYERS])
def test_layer_gradients(rng, name, factory, shape):
    layer = _init(factory(), rng)
    x = rng.standard_normal(shape)
    res = layer_gradient_check(layer, x, seed=1)
    assert res.max_rel_error < 1e-5, res.per_array


def test_batch_norm_inference_gradient(rng):
    layer = _init(nn.BatchNorm(3), rng)
    layer.buffers["moving_var"] = np.array([0.5, 2.0, 1.5])
    res = layer_gradient_check(layer, rng.standard_normal((4, 3, 2, 5)), training=False)
    assert res.max_rel_error < 1e-5, res.per_array
