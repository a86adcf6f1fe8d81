import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ulcnn.errors import ShapeError
from ulcnn.rv_layers import (BatchNorm, ChannelAttention, ChannelShuffle, Dense, DepthwiseConv1D,
                             GlobalAvgPool, PointwiseConv1D, ReLU, SeparableConv1D, channel_attention,
                             channel_shuffle, dw_conv1d, fully_connected, global_avg_pool,
                             global_max_pool, pw_conv1d, shuffle_permutation, softmax)
from ulcnn.tensor import conv1d, grad_check


# --- depthwise ------------------------------------------------------------------

def test_dw_per_channel_example():
    x = np.array([[1, 1], [2, 1], [3, 1], [4, 1]], dtype=float)[None]
    out = dw_conv1d(x, np.array([[1.0, 2.0]]), stride=2)
    assert out[0, :, 0].tolist() == [1.0, 3.0]
    assert out[0, :, 1].tolist() == [2.0, 2.0]


def test_dw_center_delta_decimates(rng):
    x = rng.standard_normal((2, 16, 3))
    kernel = np.zeros((5, 3))
    kernel[2] = 1.0  # centre tap under left padding (S-1)//2
    np.testing.assert_array_equal(dw_conv1d(x, kernel, stride=2), x[:, ::2, :])


@given(st.integers(1, 8).map(lambda n: 2 * n), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_dw_equals_diagonal_standard_conv(length, size, c, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, length, c))
    kernel = rng.standard_normal((size, c))
    full = np.zeros((size, c, c))
    for ch in range(c):
        full[:, ch, ch] = kernel[:, ch]
    np.testing.assert_allclose(dw_conv1d(x, kernel, 2), conv1d(x, full, stride=2), rtol=1e-12, atol=1e-12)


def test_dw_odd_length_rejected():
    with pytest.raises(ShapeError):
        dw_conv1d(np.zeros((1, 7, 2)), np.zeros((3, 2)), stride=2)


# --- pointwise ------------------------------------------------------------------

def test_pw_channel_sum():
    x = np.array([3.0, 4.0]).reshape(1, 1, 2)
    assert pw_conv1d(x, np.ones((1, 2, 1)), np.zeros(1)).item() == 7.0


def test_pw_identity(rng):
    x = rng.standard_normal((2, 5, 4))
    np.testing.assert_array_equal(pw_conv1d(x, np.eye(4)[None], np.zeros(4)), x)


@given(st.integers(1, 16), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_pw_equals_size_one_conv(length, c_in, c_out, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, length, c_in))
    k = rng.standard_normal((1, c_in, c_out))
    b = rng.standard_normal(c_out)
    np.testing.assert_allclose(pw_conv1d(x, k, b), conv1d(x, k, b), rtol=1e-12, atol=1e-12)


def test_pw_shape_mismatch():
    with pytest.raises(ShapeError):
        pw_conv1d(np.zeros((1, 4, 3)), np.zeros((1, 2, 5)))


# --- shuffle --------------------------------------------------------------------

def test_shuffle_group_transpose():
    x = np.array(["a", "b", "c", "d"]).reshape(1, 1, 4)
    assert channel_shuffle(x, 2).reshape(-1).tolist() == ["a", "c", "b", "d"]


def test_shuffle_g1_identity(rng):
    x = rng.standard_normal((1, 3, 6))
    np.testing.assert_array_equal(channel_shuffle(x, 1), x)


@pytest.mark.parametrize("c, g", [(4, 2), (32, 2), (32, 4), (12, 3), (30, 5)])
def test_shuffle_inverse_composition(c, g):
    x = np.arange(c, dtype=float).reshape(1, 1, c)
    assert np.array_equal(channel_shuffle(channel_shuffle(x, g), c // g), x)


@pytest.mark.parametrize("c, g", [(32, 2), (12, 3)])
def test_shuffle_formula(c, g):
    perm = shuffle_permutation(c, g)
    assert perm.tolist() == [(k % g) * (c // g) + k // g for k in range(c)]
    assert sorted(perm.tolist()) == list(range(c))


def test_shuffle_bijection_and_no_params(rng):
    layer = ChannelShuffle(32, 2)
    x = rng.standard_normal((2, 4, 32))
    assert np.array_equal(layer.backward(layer.forward(x)), x)
    assert layer.num_params() == (0, 0)


def test_shuffle_bad_groups():
    with pytest.raises(ShapeError):
        channel_shuffle(np.zeros((1, 1, 6)), 4)


# --- channel attention ----------------------------------------------------------

def test_attention_zero_network_halves(rng):
    ca = ChannelAttention(8, 4, rng=rng)
    for p in ca.params.values():
        p[...] = 0.0
    x = rng.standard_normal((2, 5, 8))
    np.testing.assert_allclose(channel_attention(x, ca), 0.5 * x, rtol=0, atol=0)


def test_attention_zero_input(rng):
    ca = ChannelAttention(8, 4, rng=rng)
    assert np.all(channel_attention(np.zeros((1, 4, 8)), ca) == 0)


def attention_oracle(x, w1, b1, w2, b2):
    """Step by step per sample with explicit loops."""
    b, length, c = x.shape
    out = np.empty_like(x)
    for n in range(b):
        avg = [sum(x[n, i, ch] for i in range(length)) / length for ch in range(c)]
        mx = [max(x[n, i, ch] for i in range(length)) for ch in range(c)]

        def dnn(v):
            h = [max(0.0, sum(v[ch] * w1[ch, j] for ch in range(c)) + b1[j]) for j in range(w1.shape[1])]
            return [sum(h[j] * w2[j, ch] for j in range(len(h))) + b2[ch] for ch in range(c)]

        za, zm = dnn(avg), dnn(mx)
        gate = [1.0 / (1.0 + np.exp(-(za[ch] + zm[ch]))) for ch in range(c)]
        for i in range(length):
            for ch in range(c):
                out[n, i, ch] = x[n, i, ch] * gate[ch]
    return out


@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    ca = ChannelAttention(4, 2, rng=rng)
    for name in ("b1", "b2"):
        ca.params[name][...] = rng.standard_normal(ca.params[name].shape)
    x = rng.standard_normal((2, 4, 4))
    p = ca.params
    np.testing.assert_allclose(channel_attention(x, ca), attention_oracle(x, p["w1"], p["b1"], p["w2"], p["b2"]),
                               rtol=1e-12, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_attention_bounded(seed):
    rng = np.random.default_rng(seed)
    ca = ChannelAttention(8, 4, rng=rng)
    x = 5 * rng.standard_normal((2, 6, 8))
    assert np.all(np.abs(channel_attention(x, ca)) <= np.abs(x))


def test_attention_parameter_count():
    ca = ChannelAttention(32, 16)
    assert ca.params["w1"].shape == (32, 2)
    assert ca.num_params() == (162, 0)


# --- counts ---------------------------------------------------------------------

def test_separable_and_bn_counts():
    assert SeparableConv1D(32, 32, 5).num_params() == (1216, 0)
    assert sum(BatchNorm(32).num_params()) == 128
    assert BatchNorm(32).num_params() == (64, 64)
    assert SeparableConv1D(32, 32, 5).dw.params["kernel"].shape == (5, 32)
    assert "bias" not in SeparableConv1D(32, 32, 5).dw.params


# --- pooling, dense, softmax ----------------------------------------------------

def test_pools():
    x = np.array([[1.0, 3.0], [2.0, 4.0]])[None]
    assert global_avg_pool(x).reshape(-1).tolist() == [1.5, 3.5]
    assert global_max_pool(x).reshape(-1).tolist() == [2.0, 4.0]


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(np.zeros((3, 11))), np.full((3, 11), 1 / 11), rtol=1e-15)


def test_softmax_rows_sum_to_one(rng):
    p = softmax(50 * rng.standard_normal((10, 11)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(p))


@pytest.mark.parametrize("seed", range(3))
def test_fully_connected_oracle(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((4, 6)), rng.standard_normal((6, 3)), rng.standard_normal(3)
    expected = np.array([[sum(x[i, k] * w[k, j] for k in range(6)) + b[j] for j in range(3)] for i in range(4)])
    np.testing.assert_allclose(fully_connected(x, w, b), expected, rtol=1e-12, atol=1e-12)


# --- gradients ------------------------------------------------------------------

def _away_from_zero(x, margin=0.05):
    return x + np.sign(x) * margin


LAYERS = {
    "dw": lambda rng: (DepthwiseConv1D(3, 5, rng=rng), rng.standard_normal((2, 8, 3)), False),
    "pw": lambda rng: (PointwiseConv1D(3, 4, rng=rng), rng.standard_normal((2, 8, 3)), False),
    "sep": lambda rng: (SeparableConv1D(3, 4, 5, rng=rng), rng.standard_normal((2, 8, 3)), False),
    "bn_train": lambda rng: (BatchNorm(3), rng.standard_normal((2, 8, 3)), True),
    "bn_eval": lambda rng: (BatchNorm(3), rng.standard_normal((2, 8, 3)), False),
    "relu": lambda rng: (ReLU(), _away_from_zero(rng.standard_normal((2, 8, 3))), False),
    "ca": lambda rng: (ChannelAttention(4, 2, rng=rng), rng.standard_normal((2, 5, 4)), False),
    "shuffle": lambda rng: (ChannelShuffle(4, 2), rng.standard_normal((2, 5, 4)), False),
    "gap": lambda rng: (GlobalAvgPool(), rng.standard_normal((2, 5, 4)), False),
    "dense": lambda rng: (Dense(5, 3, rng=rng), rng.standard_normal((4, 5)), False),
}


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_grads(name, seed):
    rng = np.random.default_rng(seed)
    layer, x, train = LAYERS[name](rng)
    for p in layer.params.values():
        p += 0.1 * rng.standard_normal(p.shape)
    report = grad_check(layer, x, step=1e-3, tolerance=1e-4, train=train)
    assert report.ok, str(report)
