"""Real-valued layers: separable convolution, batch norm, channel shuffle,
channel attention, pooling, dense and softmax."""
from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import DTYPE, Layer, glorot_uniform, same_padding


# --- depthwise / pointwise convolution ------------------------------------------

def _dw_forward(x, kernel, stride):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3:
        raise ShapeError(f"dw_conv1d input must be (B, L, C), got {x.shape}")
    size, c = kernel.shape
    if x.shape[2] != c:
        raise ShapeError(f"dw_conv1d: input has {x.shape[2]} channels, kernel has {c}", axis=2)
    if stride == 2 and x.shape[1] % 2:
        raise ShapeError(f"dw_conv1d: length {x.shape[1]} is odd; stride 2 needs an even length", axis=1)
    left, right = same_padding(size, stride, x.shape[1])
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    lout = -(-x.shape[1] // stride)
    span = stride * (lout - 1) + 1
    out = xp[:, 0:span:stride] * kernel[0]
    for s in range(1, size):
        out += xp[:, s:s + span:stride] * kernel[s]
    return out, (xp, left, x.shape[1], stride)


def dw_conv1d(x, kernel, stride=2):
    """Per-channel convolution, ``kernel[S, C]``, 'same' padding, no bias."""
    return _dw_forward(x, np.asarray(kernel, dtype=DTYPE), stride)[0]


class DepthwiseConv1D(Layer):
    def __init__(self, channels, size, stride=2, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.add_param("kernel", glorot_uniform(rng, (size, channels), size, size))

    def forward(self, x, train=False):
        y, self._cache = _dw_forward(x, self.params["kernel"], self.stride)
        return y

    def backward(self, dy):
        xp, left, length, stride = self._cache
        kernel = self.params["kernel"]
        span = stride * (dy.shape[1] - 1) + 1
        dxp = np.zeros_like(xp)
        for s in range(kernel.shape[0]):
            self.grads["kernel"][s] += np.einsum("blc,blc->c", xp[:, s:s + span:stride], dy)
            dxp[:, s:s + span:stride, :] += dy * kernel[s]
        return dxp[:, left:left + length, :]


def pw_conv1d(x, kernel, bias=None):
    """Kernel-size-1 convolution: a per-position linear map across channels."""
    x = np.asarray(x, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    if kernel.ndim == 3:
        if kernel.shape[0] != 1:
            raise ShapeError(f"pointwise kernel must have size 1, got {kernel.shape[0]}", axis=0)
        kernel = kernel[0]
    if x.shape[-1] != kernel.shape[0]:
        raise ShapeError(f"pw_conv1d: input has {x.shape[-1]} channels, kernel expects {kernel.shape[0]}",
                         axis=2)
    y = x @ kernel
    return y + bias if bias is not None else y


class PointwiseConv1D(Layer):
    def __init__(self, c_in, c_out, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add_param("kernel", glorot_uniform(rng, (1, c_in, c_out), c_in, c_out))
        self.add_param("bias", np.zeros(c_out))

    def forward(self, x, train=False):
        self._x = x
        return pw_conv1d(x, self.params["kernel"], self.params["bias"])

    def backward(self, dy):
        x = self._x
        c_in, c_out = self.params["kernel"].shape[1:]
        self.grads["kernel"][0] += x.reshape(-1, c_in).T @ dy.reshape(-1, c_out)
        self.grads["bias"] += dy.sum(axis=(0, 1))
        return dy @ self.params["kernel"][0].T


class SeparableConv1D(Layer):
    """Depthwise (stride 2, no bias) followed by pointwise (with bias)."""

    def __init__(self, c_in, c_out, size, stride=2, rng=None):
        super().__init__()
        self.dw = DepthwiseConv1D(c_in, size, stride, rng)
        self.pw = PointwiseConv1D(c_in, c_out, rng)

    def children(self):
        return iter([("dw", self.dw), ("pw", self.pw)])

    def forward(self, x, train=False):
        return self.pw.forward(self.dw.forward(x, train), train)

    def backward(self, dy):
        return self.dw.backward(self.pw.backward(dy))


# --- normalization / activation -------------------------------------------------

class BatchNorm(Layer):
    """Per-channel batch norm over every axis but the last."""

    def __init__(self, channels, momentum=0.99, eps=1e-3):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self.add_buffer("moving_mean", np.zeros(channels))
        self.add_buffer("moving_var", np.ones(channels))

    def forward(self, x, train=False):
        axes = tuple(range(x.ndim - 1))
        b = self.buffers
        if train:
            mean, var = x.mean(axis=axes), x.var(axis=axes)
            m = self.momentum
            b["moving_mean"][...] = m * b["moving_mean"] + (1 - m) * mean
            b["moving_var"][...] = m * b["moving_var"] + (1 - m) * var
        else:
            mean, var = b["moving_mean"], b["moving_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (train, xhat, inv_std, axes)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dy):
        train, xhat, inv_std, axes = self._cache
        self.grads["gamma"] += (dy * xhat).sum(axis=axes)
        self.grads["beta"] += dy.sum(axis=axes)
        dxhat = dy * self.params["gamma"]
        if not train:
            return dxhat * inv_std
        return inv_std * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))


def relu(x):
    return np.maximum(x, 0.0)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


def sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --- channel shuffle ------------------------------------------------------------

def shuffle_permutation(channels, groups):
    """Output channel k reads input channel ``perm[k]``."""
    if groups < 1 or channels % groups:
        raise ShapeError(f"shuffle groups {groups} must divide channel count {channels}", axis=2)
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x, groups):
    x = np.asarray(x)
    return x[..., shuffle_permutation(x.shape[-1], groups)]


class ChannelShuffle(Layer):
    def __init__(self, channels, groups=2):
        super().__init__()
        self.perm = shuffle_permutation(channels, groups)
        self.inverse = np.argsort(self.perm)

    def forward(self, x, train=False):
        return x[..., self.perm]

    def backward(self, dy):
        return dy[..., self.inverse]


# --- channel attention ----------------------------------------------------------

def global_avg_pool(x):
    return np.asarray(x).mean(axis=1)


def global_max_pool(x):
    return np.asarray(x).max(axis=1)


class ChannelAttention(Layer):
    """Sigmoid gate per channel from GAP and GMP through one shared two-layer perceptron."""

    def __init__(self, channels, reduction=16, rng=None):
        super().__init__()
        hidden = channels // reduction
        if hidden < 1:
            raise ShapeError(f"channel attention: {channels} channels / reduction {reduction} < 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add_param("w1", glorot_uniform(rng, (channels, hidden), channels, hidden))
        self.add_param("b1", np.zeros(hidden))
        self.add_param("w2", glorot_uniform(rng, (hidden, channels), hidden, channels))
        self.add_param("b2", np.zeros(channels))

    def _mlp(self, v):
        h_pre = v @ self.params["w1"] + self.params["b1"]
        h = np.maximum(h_pre, 0.0)
        return h @ self.params["w2"] + self.params["b2"], (v, h_pre, h)

    def _mlp_backward(self, dz, cache):
        v, h_pre, h = cache
        g, p = self.grads, self.params
        g["w2"] += h.T @ dz
        g["b2"] += dz.sum(axis=0)
        dh = (dz @ p["w2"].T) * (h_pre > 0)
        g["w1"] += v.T @ dh
        g["b1"] += dh.sum(axis=0)
        return dh @ p["w1"].T

    def attention(self, x):
        za, _ = self._mlp(global_avg_pool(x))
        zm, _ = self._mlp(global_max_pool(x))
        return sigmoid(za + zm)

    def forward(self, x, train=False):
        avg = global_avg_pool(x)
        arg = x.argmax(axis=1)
        mx = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
        za, ca = self._mlp(avg)
        zm, cm = self._mlp(mx)
        v = sigmoid(za + zm)
        self._cache = (x, arg, v, ca, cm)
        return x * v[:, None, :]

    def backward(self, dy):
        x, arg, v, ca, cm = self._cache
        dx = dy * v[:, None, :]
        dv = (dy * x).sum(axis=1)
        dz = dv * v * (1.0 - v)
        davg = self._mlp_backward(dz, ca)
        dmax = self._mlp_backward(dz, cm)
        dx += davg[:, None, :] / x.shape[1]
        np.put_along_axis(dx, arg[:, None, :],
                          np.take_along_axis(dx, arg[:, None, :], axis=1) + dmax[:, None, :], axis=1)
        return dx


def channel_attention(x, state: ChannelAttention):
    return state.forward(np.asarray(x, dtype=DTYPE))


# --- pooling / dense / softmax --------------------------------------------------

class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        self._length = x.shape[1]
        return x.mean(axis=1)

    def backward(self, dy):
        return np.repeat(dy[:, None, :] / self._length, self._length, axis=1)


def fully_connected(x, weight, bias=None):
    y = np.asarray(x, dtype=DTYPE) @ weight
    return y + bias if bias is not None else y


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add_param("kernel", glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self.add_param("bias", np.zeros(n_out))

    def forward(self, x, train=False):
        if x.shape[-1] != self.params["kernel"].shape[0]:
            raise ShapeError(f"dense: input width {x.shape[-1]}, expected {self.params['kernel'].shape[0]}",
                             axis=x.ndim - 1)
        self._x = x
        return fully_connected(x, self.params["kernel"], self.params["bias"])

    def backward(self, dy):
        self.grads["kernel"] += self._x.T @ dy
        self.grads["bias"] += dy.sum(axis=0)
        return dy @ self.params["kernel"].T


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)

