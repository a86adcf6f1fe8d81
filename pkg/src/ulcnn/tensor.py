"""Dense tensor substrate: the layer contract, 1D convolution and gradient checking.

Activations are numpy arrays laid out batch-major, channel-last:
``(batch, length, channels)`` or ``(batch, features)``. Everything is computed
in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

DTYPE = np.float64


class Layer:
    """Base layer: trainable ``params`` with matching ``grads``, non-trainable ``buffers``.

    Subclasses implement ``forward(x, train)`` and ``backward(dy)``. ``backward``
    accumulates into ``grads`` and returns the gradient w.r.t. the input of the
    most recent ``forward`` call.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name, value):
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate tensor name {name!r}")
        self.params[name] = np.asarray(value, dtype=DTYPE)
        self.grads[name] = np.zeros_like(self.params[name])

    def add_buffer(self, name, value):
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate tensor name {name!r}")
        self.buffers[name] = np.asarray(value, dtype=DTYPE)

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def children(self) -> Iterator[tuple[str, "Layer"]]:
        return iter(())

    def named_params(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self.children():
            yield from child.named_params(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def num_params(self):
        """(trainable, moving) entry counts, including children."""
        trainable = sum(p.size for _, p, _ in self.named_params())
        moving = sum(b.size for _, b in self.named_buffers())
        return trainable, moving

    def zero_grad_all(self):
        for _, _, g in self.named_params():
            g.fill(0.0)


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return iter(self.layers)

    def forward(self, x, train=False):
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for _, layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def same_padding(size, stride, length):
    """Left/right zero padding for 'same' convolution: output length ceil(L/stride)."""
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + size - length, 0)
    left = (size - 1) // 2
    left = min(left, total)
    return left, total - left


def _check_axis(name, got, want, axis):
    if got != want:
        raise ShapeError(f"{name}: axis {axis} has extent {got}, expected {want}", axis=axis)


def _windows(x, size, stride, padding):
    """Padded input and its strided sliding windows of shape (B, L', C, S)."""
    if padding == "same":
        left, right = same_padding(size, stride, x.shape[1])
    elif padding == "valid":
        left = right = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x, ((0, 0), (left, right), (0, 0))) if left or right else x
    if xp.shape[1] < size:
        raise ShapeError(f"input length {x.shape[1]} shorter than kernel size {size}", axis=1)
    win = sliding_window_view(xp, size, axis=1)[:, ::stride]
    return xp, win, (left, right)


def conv1d(x, kernel, bias=None, stride=1, padding="same"):
    """Cross-correlation of ``x[B,L,C_in]`` with ``kernel[S,C_in,C_out]``."""
    out, _ = conv1d_forward(x, kernel, bias, stride, padding)
    return out


def conv1d_forward(x, kernel, bias=None, stride=1, padding="same"):
    x = np.asarray(x, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    if x.ndim != 3:
        raise ShapeError(f"conv1d input must be rank 3 (B, L, C), got shape {x.shape}", axis=None)
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d kernel must be rank 3 (S, C_in, C_out), got shape {kernel.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    size, c_in, c_out = kernel.shape
    _check_axis("conv1d input", x.shape[2], c_in, 2)
    if bias is not None:
        _check_axis("conv1d bias", np.shape(bias)[0], c_out, 0)
    xp, win, pads = _windows(x, size, stride, padding)
    b, lout = win.shape[0], win.shape[1]
    # (B, L', C, S) -> (B*L', S*C) to match kernel.reshape(S*C, C_out)
    cols = win.transpose(0, 1, 3, 2).reshape(b * lout, size * c_in)
    out = (cols @ kernel.reshape(size * c_in, c_out)).reshape(b, lout, c_out)
    if bias is not None:
        out += bias
    cache = (cols, x.shape, xp.shape, pads, size, stride, c_in)
    return out, cache


def conv1d_backward(dy, kernel, cache):
    """Returns (dx, dkernel, dbias) for a cached ``conv1d_forward`` call."""
    cols, x_shape, xp_shape, (left, _), size, stride, c_in = cache
    b, lout, c_out = dy.shape
    dy2 = dy.reshape(b * lout, c_out)
    dkernel = (cols.T @ dy2).reshape(size, c_in, c_out)
    dbias = dy2.sum(axis=0)
    dcols = (dy2 @ kernel.reshape(size * c_in, c_out).T).reshape(b, lout, size, c_in)
    dxp = np.zeros(xp_shape, dtype=DTYPE)
    span = stride * (lout - 1) + 1
    for s in range(size):
        dxp[:, s:s + span:stride, :] += dcols[:, :, s, :]
    dx = dxp[:, left:left + x_shape[1], :]
    return dx, dkernel, dbias


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Conv1D(Layer):
    def __init__(self, c_in, c_out, size, stride=1, padding="same", use_bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.add_param("kernel", glorot_uniform(rng, (size, c_in, c_out), size * c_in, size * c_out))
        if use_bias:
            self.add_param("bias", np.zeros(c_out))

    def forward(self, x, train=False):
        y, self._cache = conv1d_forward(x, self.params["kernel"], self.params.get("bias"),
                                        self.stride, self.padding)
        return y

    def backward(self, dy):
        dx, dk, db = conv1d_backward(dy, self.params["kernel"], self._cache)
        self.grads["kernel"] += dk
        if "bias" in self.params:
            self.grads["bias"] += db
        return dx


# --- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def ok(self):
        return not self.failures and all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def __str__(self):
        lines = [f"{name:<32s} {err:.3e} {'ok' if err <= self.tolerance else 'FAIL'}"
                 for name, err in self.errors.items()]
        lines += [f"{name:<32s} non-finite analytic gradient" for name in self.failures]
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=1e-6):
    """Max absolute difference scaled by the larger gradient magnitude in the tensor.

    ``floor`` bounds the scale from below so tensors whose true gradient is zero
    (e.g. a conv bias feeding batch norm) compare on absolute error.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def projection_loss(rng, like):
    """Scalar loss ``sum(w * y)`` with fixed random weights ``w`` shaped like ``y``.

    A plain sum is a poor probe: e.g. the gradient of ``sum(BN(x))`` w.r.t. ``x``
    is identically zero.
    """
    weights = [rng.standard_normal(a.shape) for a in _planes(like)]

    def loss(y):
        planes = _planes(y)
        value = sum(float((w * p).sum()) for w, p in zip(weights, planes))
        return value, _rebuild(y, weights)

    return loss


def _planes(t):
    if hasattr(t, "re") and hasattr(t, "im"):
        return [t.re, t.im]
    return [t]


def _rebuild(like, planes):
    if hasattr(like, "re") and hasattr(like, "im"):
        return type(like)(planes[0], planes[1])
    return planes[0]


def grad_check(layer, x, step=1e-3, tolerance=1e-4, loss: Callable | None = None,
               train=False, seed=0) -> GradCheckReport:
    """Compare ``layer.backward`` against central finite differences.

    ``x`` may be a real array or a ComplexTensor. ``loss(y) -> (value, dy)``
    defaults to a fixed random projection of the output. Moving statistics are
    restored after every forward so the check is side-effect free.
    """
    rng = np.random.default_rng(seed)
    x = _rebuild(x, [np.array(p, dtype=DTYPE) for p in _planes(x)])
    saved ={n: b.copy() for n, b in layer.named_buffers()}
    buffers = dict(layer.named_buffers())

    def restore():
        for n, b in saved.items():
            buffers[n][...] = b

    def run():
        y = layer.forward(x, train=train)
        restore()
        return y

    y = run()
    if loss is None:
        loss = projection_loss(rng, y)
    _, dy = loss(y)
    layer.zero_grad_all()
    dx = layer.backward(dy)

    report = GradCheckReport(tolerance=tolerance)
    targets = [(name, p, g.copy()) for name, p, g in layer.named_params()]
    for i, (plane, grad) in enumerate(zip(_planes(x), _planes(dx))):
        suffix = ("", ".re", ".im")[0 if len(_planes(x)) == 1 else i + 1]
        targets.append((f"input{suffix}", plane, np.asarray(grad)))

    for name, arr, analytic in targets:
        if not np.all(np.isfinite(analytic)):
            report.failures.append(name)
            continue
        numeric = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp, _ = loss(run())
            flat[j] = orig - step
            lm, _ = loss(run())
            flat[j] = orig
            nflat[j] = (lp - lm) / (2 * step)
        report.errors[name] = relative_error(analytic, numeric)
    return report


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
