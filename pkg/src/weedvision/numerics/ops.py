"""Differentiable neural-network operations on :class:`Tensor`.

All kernels are numpy-vectorized; convolutions run as a single im2col matrix
product per call, and their input gradients as the equivalent correlation of
the stride-dilated upstream gradient, so no scatter loops appear on the
training path.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ShapeError
from .tensor import Tensor, _make, as_tensor

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


# -- activations ------------------------------------------------------------


def gelu(x) -> Tensor:
    """Exact Gaussian-error linear unit."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid_np(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    pos = z >= 0
    out = np.empty_like(z)
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def backward(g):
        return (g * _sigmoid_np(x.data),)

    return _make(out, (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction before exponentiation)."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        sm = np.exp(out)
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; the smaller operand receives the gradient (ties to a)."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        ga = _unbroadcast_like(g * take_a, a.data.shape)
        gb = _unbroadcast_like(g * ~take_a, b.data.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; the larger operand receives the gradient (ties to a)."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        ga = _unbroadcast_like(g * take_a, a.data.shape)
        gb = _unbroadcast_like(g * ~take_a, b.data.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def _unbroadcast_like(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- normalization and linear maps ----------------------------------------


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        d = x.shape[-1]
        gxhat = g * gamma.data
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T + bias over the last axis; weight is [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        gb = None if bias is None else g2.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


# -- convolution ------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[N,C,H,W] -> [N*Ho*Wo, C*kh*kw] patch matrix for the given stride."""
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] with [O,C,kh,kw] kernels."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    n, c, h, w = x.shape
    o, c2, kh, kw = weight.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {c2}")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, s)
    out = cols @ weight.data.reshape(o, -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = None if bias is None else g.sum(axis=(0, 2, 3))

        # Input gradient: correlate the stride-dilated upstream gradient with
        # the spatially flipped kernel, then crop the padding margin.
        hp, wp = h + 2 * p, w + 2 * p
        ld_h, ld_w = (ho - 1) * s + 1, (wo - 1) * s + 1
        ydil = np.zeros((n, o, ld_h, ld_w), dtype=g.dtype)
        ydil[:, :, ::s, ::s] = g
        pad_l = kh - 1
        extra_h = hp - (ld_h + kh - 1)
        extra_w = wp - (ld_w + kw - 1)
        ypad = np.pad(ydil, ((0, 0), (0, 0), (pad_l, pad_l + extra_h), (kw - 1, kw - 1 + extra_w)))
        cols_g = _im2col(ypad, kh, kw, 1)
        wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        gx_pad = (cols_g @ wflip.T).reshape(n, hp, wp, c).transpose(0, 3, 1, 2)
        gx = gx_pad[:, :, p:p + h, p:p + w] if p else gx_pad
        gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


# -- pooling and resampling ---------------------------------------------------


def _check_pool(x, k):
    if x.ndim != 4:
        raise ShapeError("pooling expects a 4-d tensor")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"pooling window {k} must divide spatial dims {h}x{w}")
    return n, c, h, w


def max_pool(x, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride equals the window size)."""
    x = as_tensor(x)
    k = int(kernel)
    n, c, h, w = _check_pool(x, k)
    win = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // k, w // k, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(gx.reshape(n, c, h, w)),)

    return _make(np.ascontiguousarray(out), (x,), backward)


def avg_pool(x, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling."""
    x = as_tensor(x)
    k = int(kernel)
    n, c, h, w = _check_pool(x, k)
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Repeat each spatial cell ``factor`` times along both axes."""
    x = as_tensor(x)
    f = int(factor)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest expects a 4-d tensor")
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


# -- losses -------------------------------------------------------------------


def mse(a, b) -> Tensor:
    """Mean of squared elementwise differences; shapes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray((diff * diff).mean())
    scale = 2.0 / a.numel

    def backward(g):
        gd = g * scale * diff
        return gd, -gd

    return _make(out, (a, b), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits; targets are constants."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce shape mismatch: {logits.shape} vs {t.shape}")
    z = logits.data
    out = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        return (g * (_sigmoid_np(z) - t),)

    return _make(out, (logits,), backward)
