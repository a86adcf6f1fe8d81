"""Complex-valued layers of the IQ channel fusion front end.

Complex activations are carried as a pair of real planes, each shaped
``(batch, length, channels)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import DTYPE, Layer, conv1d_backward, conv1d_forward


@dataclass
class ComplexTensor:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=DTYPE)
        self.im = np.asarray(self.im, dtype=DTYPE)
        if self.re.shape != self.im.shape:
            raise ShapeError(f"real plane {self.re.shape} and imaginary plane {self.im.shape} differ")

    @property
    def shape(self):
        return self.re.shape

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z)
        return cls(z.real.copy(), z.imag.copy())

    def to_complex(self):
        return self.re + 1j * self.im

    @classmethod
    def from_iq(cls, iq):
        """``iq[B, 2, K]`` (I row, Q row) -> one complex channel, shape ``(B, K, 1)``."""
        iq = np.asarray(iq, dtype=DTYPE)
        if iq.ndim != 3 or iq.shape[1] != 2:
            raise ShapeError(f"IQ input must have shape (B, 2, K), got {iq.shape}", axis=1)
        return cls(iq[:, 0, :, None], iq[:, 1, :, None])


def cv_conv1d(x: ComplexTensor, w: ComplexTensor, bias: ComplexTensor | None = None,
              stride=1, padding="same") -> ComplexTensor:
    """Complex cross-correlation expanded into four real convolutions."""
    out, _ = _cv_conv_forward(x, w, bias, stride, padding)
    return out


def _cv_conv_forward(x, w, bias, stride, padding):
    rr, c_rr = conv1d_forward(x.re, w.re, None, stride, padding)
    ii, c_ii = conv1d_forward(x.im, w.im, None, stride, padding)
    ri, c_ri = conv1d_forward(x.re, w.im, None, stride, padding)
    ir, c_ir = conv1d_forward(x.im, w.re, None, stride, padding)
    re, im = rr - ii, ri + ir
    if bias is not None:
        re = re + bias.re
        im = im + bias.im
    return ComplexTensor(re, im), (c_rr, c_ii, c_ri, c_ir)


class CVConv1D(Layer):
    def __init__(self, c_in, n_filters, size, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = np.sqrt(6.0 / (size * c_in + n_filters))
        shape = (size, c_in, n_filters)
        self.add_param("w_re", rng.uniform(-limit, limit, shape))
        self.add_param("w_im", rng.uniform(-limit, limit, shape))
        self.add_param("b_re", np.zeros(n_filters))
        self.add_param("b_im", np.zeros(n_filters))

    @property
    def weight(self):
        return ComplexTensor(self.params["w_re"], self.params["w_im"])

    def forward(self, x, train=False):
        p = self.params
        bias = ComplexTensor(p["b_re"], p["b_im"])
        y, self._cache = _cv_conv_forward(x, self.weight, bias, 1, "same")
        return y

    def backward(self, dy: ComplexTensor):
        c_rr, c_ii, c_ri, c_ir = self._cache
        p, g = self.params, self.grads
        # re = x.re*W.re - x.im*W.im ; im = x.re*W.im + x.im*W.re
        dxr1, dwr1, _ = conv1d_backward(dy.re, p["w_re"], c_rr)
        dxi1, dwi1, _ = conv1d_backward(-dy.re, p["w_im"], c_ii)
        dxr2, dwi2, _ = conv1d_backward(dy.im, p["w_im"], c_ri)
        dxi2, dwr2, _ = conv1d_backward(dy.im, p["w_re"], c_ir)
        g["w_re"] += dwr1 + dwr2
        g["w_im"] += dwi1 + dwi2
        g["b_re"] += dy.re.sum(axis=(0, 1))
        g["b_im"] += dy.im.sum(axis=(0, 1))
        return ComplexTensor(dxr1 + dxr2, dxi1 + dxi2)


def _inverse_sqrt_2x2(vrr, vii, vri):
    """Entries of the inverse square root of [[vrr, vri], [vri, vii]] (SPD)."""
    det = vrr * vii - vri * vri
    if np.any(det <= 0):
        bad = int(np.flatnonzero(det <= 0)[0])
        raise NumericError(f"complex batch norm: singular covariance in channel {bad}")
    s = np.sqrt(det)
    t = np.sqrt(vrr + vii + 2 * s)
    inv = 1.0 / (s * t)
    return (vii + s) * inv, (vrr + s) * inv, -vri * inv, (s, t, inv)


class CVBatchNorm(Layer):
    """Complex batch normalization by 2x2 covariance whitening.

    Each complex channel is centred, whitened with the inverse square root of
    its real/imaginary covariance, then scaled by a symmetric 2x2 matrix
    (gamma_rr, gamma_ri, gamma_ii) and shifted by a complex beta.
    """

    def __init__(self, channels, momentum=0.99, eps=1e-3):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        half = 1.0 / np.sqrt(2.0)
        self.add_param("gamma_rr", np.full(channels, half))
        self.add_param("gamma_ii", np.full(channels, half))
        self.add_param("gamma_ri", np.zeros(channels))
        self.add_param("beta_re", np.zeros(channels))
        self.add_param("beta_im", np.zeros(channels))
        self.add_buffer("moving_mean_re", np.zeros(channels))
        self.add_buffer("moving_mean_im", np.zeros(channels))
        self.add_buffer("moving_vrr", np.full(channels, half))
        self.add_buffer("moving_vii", np.full(channels, half))
        self.add_buffer("moving_vri", np.zeros(channels))

    def forward(self, x: ComplexTensor, train=False):
        p, b = self.params, self.buffers
        if train:
            n = x.re.shape[0] * x.re.shape[1]
            if n < 2:
                raise ShapeError("complex batch norm needs batch*length > 1 in train mode")
            mr, mi = x.re.mean(axis=(0, 1)), x.im.mean(axis=(0, 1))
            cr, ci = x.re - mr, x.im - mi
            vrr = (cr * cr).mean(axis=(0, 1))
            vii = (ci * ci).mean(axis=(0, 1))
            vri = (cr * ci).mean(axis=(0, 1))
            m = self.momentum
            b["moving_mean_re"][...] = m * b["moving_mean_re"] + (1 - m) * mr
            b["moving_mean_im"][...] = m * b["moving_mean_im"] + (1 - m) * mi
            b["moving_vrr"][...] = m * b["moving_vrr"] + (1 - m) * vrr
            b["moving_vii"][...] = m * b["moving_vii"] + (1 - m) * vii
            b["moving_vri"][...] = m * b["moving_vri"] + (1 - m) * vri
        else:
            cr, ci = x.re - b["moving_mean_re"], x.im - b["moving_mean_im"]
            vrr, vii, vri = b["moving_vrr"], b["moving_vii"], b["moving_vri"]
        vrr_e, vii_e = vrr + self.eps, vii + self.eps
        wrr, wii, wri, aux = _inverse_sqrt_2x2(vrr_e, vii_e, vri)
        hr = wrr * cr + wri * ci
        hi = wri * cr + wii * ci
        yr = p["gamma_rr"] * hr + p["gamma_ri"] * hi + p["beta_re"]
        yi = p["gamma_ri"] * hr + p["gamma_ii"] * hi + p["beta_im"]
        self._cache = (train, cr, ci, hr, hi, vrr_e, vii_e, vri, wrr, wii, wri, aux)
        return ComplexTensor(yr, yi)

    def backward(self, dy: ComplexTensor):
        train, cr, ci, hr, hi, vrr, vii, vri, wrr, wii, wri, (s, t, inv) = self._cache
        p, g = self.params, self.grads
        ax = (0, 1)
        g["beta_re"] += dy.re.sum(axis=ax)
        g["beta_im"] += dy.im.sum(axis=ax)
        g["gamma_rr"] += (dy.re * hr).sum(axis=ax)
        g["gamma_ii"] += (dy.im * hi).sum(axis=ax)
        g["gamma_ri"] += (dy.re * hi + dy.im * hr).sum(axis=ax)
        dhr = p["gamma_rr"] * dy.re + p["gamma_ri"] * dy.im
        dhi = p["gamma_ri"] * dy.re + p["gamma_ii"] * dy.im
        dcr = wrr * dhr + wri * dhi
        dci = wri * dhr + wii * dhi
        if not train:
            return ComplexTensor(dcr, dci)

        n = cr.shape[0] * cr.shape[1]
        g_wrr = (dhr * cr).sum(axis=ax)
        g_wii = (dhi * ci).sum(axis=ax)
        g_wri = (dhr * ci + dhi * cr).sum(axis=ax)
        # back through wrr=(vii+s)inv, wii=(vrr+s)inv, wri=-vri*inv, inv=1/(s t)
        g_inv = g_wrr * (vii + s) + g_wii * (vrr + s) - g_wri * vri
        g_s = (g_wrr + g_wii) * inv - g_inv * inv / s
        g_t = -g_inv * inv / t
        g_vrr = g_wii * inv + g_t / (2 * t)
        g_vii = g_wrr * inv + g_t / (2 * t)
        g_vri = -g_wri * inv
        g_s = g_s + g_t / t
        g_vrr = g_vrr + g_s * vii / (2 * s)
        g_vii = g_vii + g_s * vrr / (2 * s)
        g_vri = g_vri - g_s * vri / s
        dcr = dcr + (2 * cr * g_vrr + ci * g_vri) / n
        dci = dci + (2 * ci * g_vii + cr * g_vri) / n
        dxr = dcr - dcr.mean(axis=ax)
        dxi = dci - dci.mean(axis=ax)
        return ComplexTensor(dxr, dxi)


def cv_batch_norm(x: ComplexTensor, state: CVBatchNorm, mode="eval") -> ComplexTensor:
    return state.forward(x, train=(mode == "train"))


def cv_relu(x: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(np.maximum(x.re, 0.0), np.maximum(x.im, 0.0))


class CVReLU(Layer):
    def forward(self, x, train=False):
        self._mask = (x.re > 0, x.im > 0)
        return cv_relu(x)

    def backward(self, dy):
        mr, mi = self._mask
        return ComplexTensor(dy.re * mr, dy.im * mi)


def cv_to_real(x: ComplexTensor) -> np.ndarray:
    """Stack planes on the channel axis: ``[B, L, C]`` complex -> ``[B, L, 2C]`` real."""
    return np.concatenate([x.re, x.im], axis=-1)


def real_to_cv(x) -> ComplexTensor:
    x = np.asarray(x)
    if x.shape[-1] % 2:
        raise ShapeError(f"channel axis {x.shape[-1]} is odd; cannot split into planes", axis=x.ndim - 1)
    c = x.shape[-1] // 2
    return ComplexTensor(x[..., :c], x[..., c:])


class CVToReal(Layer):
    def forward(self, x, train=False):
        return cv_to_real(x)

    def backward(self, dy):
        return real_to_cv(dy)
